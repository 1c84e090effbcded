//! Gaze estimation module: attribute-query attention over the feature map,
//! attribute localization, the distance and squared-error losses, and the
//! attention transition to gaze maps with its matched BCE loss.
//!
//! All per-sample losses here return a scalar for one image; batch means are
//! taken by the caller.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{hungarian, Assignment, CostMatrix};

/// Per-attribute spatial distributions, shape `H×W×K`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps(Tensor);

impl AttentionMaps {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::dimension("attention maps", maps.shape(), &[3]));
        }
        let k = maps.shape()[2];
        let mut sums = vec![0.0; k];
        for (i, &v) in maps.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::usage(format!("attention entry {v} outside [0, 1]")));
            }
            sums[i % k] += v;
        }
        if let Some((ch, s)) = sums.iter().enumerate().find(|(_, s)| (**s - 1.0).abs() > 1e-9) {
            return Err(Error::usage(format!("attention channel {ch} sums to {s}")));
        }
        Ok(AttentionMaps(maps))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Gaze predictions `g(x)` or recorded gaze `G(x)`, shape `H×W×D`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMaps(Tensor);

impl GazeMaps {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::dimension("gaze maps", maps.shape(), &[3]));
        }
        if let Some(v) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::usage(format!("gaze entry {v} outside [0, 1]")));
        }
        Ok(GazeMaps(maps))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }
}

pub type GazeGroundTruth = GazeMaps;

/// Bilinear attention: `softmax_rows(E · reshape(f)ᵀ)`, returned as `H×W×K`.
pub fn attention(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(query).to_vec(), tape.shape(key).to_vec());
    if qs.len() != 2 || ks.len() != 3 || qs[1] != ks[2] {
        return Err(Error::dimension("attention", &qs, &ks));
    }
    let (h, w, c) = (ks[0], ks[1], ks[2]);
    let k = qs[0];
    let flat = tape.reshape(key, &[h * w, c])?;
    let flat_t = tape.transpose(flat)?;
    let scores = tape.matmul(query, flat_t)?;
    let rows = tape.softmax_rows(scores)?;
    let cols = tape.transpose(rows)?;
    tape.reshape(cols, &[h, w, k])
}

/// Squared grid distance of every cell to the argmax cell of its channel,
/// plus the argmax cell indices (first row-major cell wins ties).
pub fn distance_coefficients(maps: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::dimension("distance_loss", shape, &[3]));
    }
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    let mut argmax = vec![0usize; k];
    let mut best = vec![f64::NEG_INFINITY; k];
    for cell in 0..h * w {
        for ch in 0..k {
            let v = maps.data()[cell * k + ch];
            if v > best[ch] {
                best[ch] = v;
                argmax[ch] = cell;
            }
        }
    }
    let coeff = Tensor::from_fn(vec![h, w, k], |i| {
        let (cell, ch) = (i / k, i % k);
        let (i0, j0) = ((cell / w) as f64, (cell % w) as f64);
        let (i1, j1) = ((argmax[ch] / w) as f64, (argmax[ch] % w) as f64);
        (i0 - i1).powi(2) + (j0 - j1).powi(2)
    });
    Ok((coeff, argmax))
}

/// `Σ_k Σ_ij A[i,j,k]·((i−ĩ)² + (j−ĵ)²)` with the argmax `(ĩ,ĵ)` held constant.
/// `per_attribute` divides by `K`.
pub fn distance_loss(tape: &mut Tape, maps: Var, per_attribute: bool) -> Result<Var> {
    let (coeff, argmax) = distance_coefficients(tape.value(maps))?;
    tape.record_selection(&argmax);
    let k = coeff.shape()[2];
    let c = tape.constant(coeff);
    let weighted = tape.mul(maps, c)?;
    let total = tape.sum(weighted);
    Ok(if per_attribute {
        tape.scale(total, 1.0 / k as f64)
    } else {
        total
    })
}

/// Attribute scores `a(x)`: spatial max of each attention channel.
pub fn localize_attributes(tape: &mut Tape, maps: Var) -> Result<Var> {
    tape.global_max_pool(maps)
}

/// `‖a − φ(y)‖²`, summed over attributes.
pub fn mse_loss(tape: &mut Tape, scores: Var, attributes: &[f64]) -> Result<Var> {
    if tape.shape(scores) != [attributes.len()] {
        return Err(Error::dimension("mse_loss", tape.shape(scores), &[attributes.len()]));
    }
    let target = tape.constant(Tensor::vector(attributes.to_vec()));
    let diff = tape.sub(scores, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// `sigmoid(conv1×1(A))`: mixes `K` attention channels into `D` gaze maps.
pub fn attention_transition(tape: &mut Tape, maps: Var, weight: Var, bias: Var) -> Result<Var> {
    let (ms, ws) = (tape.shape(maps).to_vec(), tape.shape(weight).to_vec());
    if ms.len() != 3 || ws.len() != 2 || ws[0] != ms[2] {
        return Err(Error::dimension("attention_transition", &ms, &ws));
    }
    let (h, w, k) = (ms[0], ms[1], ms[2]);
    let d = ws[1];
    let flat = tape.reshape(maps, &[h * w, k])?;
    let mixed = tape.matmul(flat, weight)?;
    let mixed = tape.add_bias(mixed, bias)?;
    let g = tape.sigmoid(mixed);
    tape.reshape(g, &[h, w, d])
}

/// L1 distance between every predicted channel `p` and target channel `q`.
pub fn gaze_cost_matrix(pred: &Tensor, target: &Tensor) -> Result<CostMatrix> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::dimension("gaze_loss", pred.shape(), target.shape()));
    }
    let d = pred.shape()[2];
    let mut costs = vec![0.0; d * d];
    for (pv, tv) in pred.data().chunks(d).zip(target.data().chunks(d)) {
        for p in 0..d {
            for q in 0..d {
                costs[p * d + q] += (pv[p] - tv[q]).abs();
            }
        }
    }
    CostMatrix::from_flat(d, costs)
}

/// Optimal one-to-one pairing of predicted gaze channels with target channels.
pub fn match_gaze_channels(pred: &Tensor, target: &Tensor) -> Result<Assignment> {
    Ok(hungarian(&gaze_cost_matrix(pred, target)?))
}

/// Target with channels reordered so that channel `p` holds `target[perm[p]]`.
pub fn permute_channels(target: &Tensor, perm: &[usize]) -> Tensor {
    let d = perm.len();
    Tensor::from_fn(target.shape().to_vec(), |i| {
        let (cell, p) = (i / d, i % d);
        target.data()[cell * d + perm[p]]
    })
}

/// Pixel-averaged BCE between `g` and the Hungarian-matched channels of `target`.
/// The pairing is a constant selection; gradients flow only through the BCE.
pub fn gaze_loss(tape: &mut Tape, gaze: Var, target: &Tensor) -> Result<Var> {
    let assignment = match_gaze_channels(tape.value(gaze), target)?;
    tape.record_selection(&assignment.perm);
    let matched = permute_channels(target, &assignment.perm);
    tape.bce(gaze, &matched)
}
