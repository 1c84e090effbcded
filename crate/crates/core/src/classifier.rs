//! Semantic projection and class scoring.
//!
//! A global feature `h` is projected to attribute space with `V` (`C×K`) and
//! compared with each class attribute vector `φ(y)`, either by `σ`-scaled
//! cosine or by a raw dot product (the ablation baseline). Seen-class scores
//! can be lowered by a calibration constant `γ` at generalized test time.

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// How cosine treats a zero-length vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroVector {
    /// Report a usage error.
    Strict,
    /// Define the cosine as zero.
    Lenient,
}

/// Class attribute matrix `Φ` (`#classes × K`) with the seen/unseen partition.
/// Class ids are row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    attributes: Tensor,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    is_seen: Vec<bool>,
}

impl ClassEmbeddings {
    pub fn new(attributes: Tensor, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        if attributes.shape().len() != 2 {
            return Err(Error::dimension("class embeddings", attributes.shape(), &[2]));
        }
        let n = attributes.shape()[0];
        if !attributes.all_finite() {
            return Err(Error::usage("class attribute vectors must be finite"));
        }
        if let Some(r) = (0..n).find(|&r| attributes.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::usage(format!("class {r} has an all-zero attribute vector")));
        }
        let mut owner = vec![None; n];
        for (&c, side) in seen.iter().map(|c| (c, true)).chain(unseen.iter().map(|c| (c, false))) {
            if c >= n {
                return Err(Error::usage(format!("class id {c} outside {n} classes")));
            }
            if owner[c].replace(side).is_some() {
                return Err(Error::usage(format!("class {c} listed twice in the seen/unseen split")));
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(Error::usage(format!("class {c} is neither seen nor unseen")));
        }
        Ok(ClassEmbeddings {
            attributes,
            seen,
            unseen,
            is_seen: owner.into_iter().map(|o| o.unwrap_or(false)).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.shape()[0]
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.shape()[1]
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.attributes.row(class)
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.is_seen[class]
    }

    /// Position of `class` within [`seen`](Self::seen).
    pub fn seen_position(&self, class: usize) -> Result<usize> {
        self.seen
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::usage(format!("class {class} is not a seen class")))
    }

    /// Rows of the given classes stacked into a matrix.
    pub fn subset(&self, classes: &[usize]) -> Tensor {
        let k = self.num_attributes();
        let mut data = Vec::with_capacity(classes.len() * k);
        for &c in classes {
            data.extend_from_slice(self.row(c));
        }
        Tensor::matrix(classes.len(), k, data).expect("non-empty subset")
    }
}

/// `hᵀV` as a `K` vector.
pub fn project(h: &[f64], projection: &Tensor) -> Result<Vec<f64>> {
    let s = projection.shape();
    if s.len() != 2 || s[0] != h.len() {
        return Err(Error::dimension("project", &[h.len()], s));
    }
    let k = s[1];
    let mut out = vec![0.0; k];
    for (&hv, row) in h.iter().zip(projection.data().chunks(k)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += hv * v;
        }
    }
    Ok(out)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

/// Cosine of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64], zero: ZeroVector) -> Result<f64> {
    match (unit(a), unit(b)) {
        (Some(ua), Some(ub)) => Ok(dot(&ua, &ub).clamp(-1.0, 1.0)),
        _ => match zero {
            ZeroVector::Lenient => Ok(0.0),
            ZeroVector::Strict => Err(Error::usage("cosine of a zero-length vector")),
        },
    }
}

/// `σ · cos(hᵀV, φ(y))` for each listed class.
pub fn cosine_scores(
    h: &[f64],
    projection: &Tensor,
    classes: &ClassEmbeddings,
    subset: &[usize],
    sigma: f64,
    zero: ZeroVector,
) -> Result<Vec<f64>> {
    let p = project(h, projection)?;
    subset
        .iter()
        .map(|&c| cosine(&p, classes.row(c), zero).map(|cos| sigma * cos))
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores projected features against class embeddings for inference.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    pub projection: &'a Tensor,
    pub classes: &'a ClassEmbeddings,
    pub similarity: Similarity,
    pub sigma: f64,
    pub zero: ZeroVector,
}

impl Scorer<'_> {
    /// Scores over every class in id order: `σ·cos` or the raw dot product.
    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.classes.num_classes()).collect();
        match self.similarity {
            Similarity::Cosine => cosine_scores(h, self.projection, self.classes, &all, self.sigma, self.zero),
            Similarity::Dot => {
                let p = project(h, self.projection)?;
                Ok(all.iter().map(|&c| dot(&p, self.classes.row(c))).collect())
            }
        }
    }

    /// Best unseen class.
    pub fn predict_zsl(&self, h: &[f64]) -> Result<usize> {
        let scores = self.scores(h)?;
        predict_among(&scores, self.classes.unseen())
    }

    /// Best class overall after subtracting `gamma` from seen-class scores.
    pub fn predict_gzsl(&self, h: &[f64], gamma: f64) -> Result<usize> {
        let scores = self.scores(h)?;
        calibrated_argmax(&scores, self.classes, gamma)
    }
}

/// Highest-scoring class among `candidates` (ids index into `scores`).
pub fn predict_among(scores: &[f64], candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::usage("no candidate classes to predict from"));
    }
    let restricted: Vec<f64> = candidates.iter().map(|&c| scores[c]).collect();
    Ok(candidates[argmax(&restricted).expect("non-empty")])
}

/// Calibrated stacking over all classes.
pub fn calibrated_argmax(scores: &[f64], classes: &ClassEmbeddings, gamma: f64) -> Result<usize> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::usage(format!("calibration gamma must be finite and ≥ 0, got {gamma}")));
    }
    let adjusted: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(c, &s)| if classes.is_seen(c) { s - gamma } else { s })
        .collect();
    argmax(&adjusted).ok_or_else(|| Error::usage("no classes to predict from"))
}

/// Best unseen class by cosine compatibility.
pub fn predict_zsl(h: &[f64], projection: &Tensor, classes: &ClassEmbeddings, zero: ZeroVector) -> Result<usize> {
    if classes.unseen().is_empty() {
        return Err(Error::usage("zero-shot prediction needs at least one unseen class"));
    }
    let scores = cosine_scores(h, projection, classes, classes.unseen(), 1.0, zero)?;
    Ok(classes.unseen()[argmax(&scores).expect("non-empty")])
}

/// Calibrated-stacking prediction over all classes with `σ`-scaled cosine.
pub fn predict_gzsl(
    h: &[f64],
    projection: &Tensor,
    classes: &ClassEmbeddings,
    sigma: f64,
    gamma: f64,
    zero: ZeroVector,
) -> Result<usize> {
    Scorer {
        projection,
        classes,
        similarity: Similarity::Cosine,
        sigma,
        zero,
    }
    .predict_gzsl(h, gamma)
}

/// Logits for a batch of global features `B×C` against the classes in
/// `targets` (`n×K`), recorded on the tape. `sigma` scales cosine logits and
/// is ignored for dot-product similarity.
pub fn logits_on_tape(
    tape: &mut Tape,
    features: Var,
    projection: Var,
    targets: &Tensor,
    similarity: Similarity,
    sigma: Var,
) -> Result<Var> {
    let projected = tape.matmul(features, projection)?;
    match similarity {
        Similarity::Cosine => {
            let unit_rows = tape.normalize_rows(projected)?;
            let phi = normalized_rows(targets)?;
            let phi_t = tape.constant(phi.transpose()?);
            let cos = tape.matmul(unit_rows, phi_t)?;
            tape.scale_by(cos, sigma)
        }
        Similarity::Dot => {
            let phi_t = tape.constant(targets.transpose()?);
            tape.matmul(projected, phi_t)
        }
    }
}

fn normalized_rows(m: &Tensor) -> Result<Tensor> {
    let cols = m.shape()[1];
    let mut data = m.data().to_vec();
    for row in data.chunks_mut(cols) {
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            return Err(Error::usage("class attribute vector of zero length"));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(m.shape().to_vec(), data)
}

/// Softmax cross-entropy of `logits` (`B×n`) against target columns, mean over the batch.
pub fn cls_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy_rows(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    fn classes(rows: &[&[f64]], seen: &[usize], unseen: &[usize]) -> ClassEmbeddings {
        let k = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ClassEmbeddings::new(Tensor::matrix(rows.len(), k, data).unwrap(), seen.to_vec(), unseen.to_vec()).unwrap()
    }

    #[test]
    fn cosine_score_examples() {
        let c = classes(&[&[3.0, 4.0], &[0.0, 1.0], &[1.0, 0.0]], &[0], &[1, 2]);
        let s = cosine_scores(&[3.0, 4.0], &eye(2), &c, &[0], 20.0, ZeroVector::Strict).unwrap();
        assert_eq!(s, vec![20.0]);
        let s = cosine_scores(&[1.0, 0.0], &eye(2), &c, &[1], 20.0, ZeroVector::Strict).unwrap();
        assert_eq!(s, vec![0.0]);
        let s = cosine_scores(&[1.0, 1.0], &eye(2), &c, &[2], 20.0, ZeroVector::Strict).unwrap();
        assert!((s[0] - 14.142135623730951).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_strict_and_lenient() {
        let c = classes(&[&[1.0, 0.0]], &[0], &[]);
        assert!(cosine_scores(&[0.0, 0.0], &eye(2), &c, &[0], 20.0, ZeroVector::Strict).is_err());
        let s = cosine_scores(&[0.0, 0.0], &eye(2), &c, &[0], 20.0, ZeroVector::Lenient).unwrap();
        assert_eq!(s, vec![0.0]);
        let bad = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(ClassEmbeddings::new(bad, vec![0], vec![1]).is_err());
    }

    #[test]
    fn class_partition_is_validated() {
        let m = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(ClassEmbeddings::new(m.clone(), vec![0, 1], vec![1, 2]).is_err());
        assert!(ClassEmbeddings::new(m.clone(), vec![0], vec![1]).is_err());
        assert!(ClassEmbeddings::new(m.clone(), vec![0, 3], vec![1, 2]).is_err());
        let ok = ClassEmbeddings::new(m, vec![2, 0], vec![1]).unwrap();
        assert_eq!(ok.seen_position(0).unwrap(), 1);
        assert!(ok.seen_position(1).is_err());
    }

    fn loss_of(scores: &[f64], target: usize) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, scores.len(), scores.to_vec()).unwrap());
        let loss = cls_loss(&mut tape, l, &[target]).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn cls_loss_examples() {
        assert!((loss_of(&[3.0; 4], 2) - 4f64.ln()).abs() < 1e-15);
        let tiny = loss_of(&[20.0, 0.0], 0);
        let expected = (-20f64).exp().ln_1p();
        assert!((tiny - expected).abs() <= 1e-12 * expected);
        assert!((tiny - 2.061e-9).abs() < 1e-12);
        let a = loss_of(&[1.0, -2.0, 0.5], 2);
        let b = loss_of(&[0.5, 1.0, -2.0], 0);
        assert_eq!(a, b);

        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(cls_loss(&mut tape, l, &[2]).is_err());
    }

    #[test]
    fn zsl_prediction_examples() {
        let c = classes(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[0], &[1, 2]);
        assert_eq!(predict_zsl(&[0.0, 2.0, 0.5], &eye(3), &c, ZeroVector::Strict).unwrap(), 1);
        let single = classes(&[&[1.0, 0.0], &[0.0, 1.0]], &[0], &[1]);
        assert_eq!(predict_zsl(&[5.0, 0.1], &eye(2), &single, ZeroVector::Strict).unwrap(), 1);
        let none = classes(&[&[1.0, 0.0]], &[0], &[]);
        assert!(predict_zsl(&[1.0, 0.0], &eye(2), &none, ZeroVector::Strict).is_err());
        assert_eq!(predict_among(&[0.0, 0.2, 0.9, 0.5], &[1, 2, 3]).unwrap(), 2);
    }

    #[test]
    fn calibrated_stacking_examples() {
        let c = classes(&[&[1.0], &[1.0]], &[0], &[1]);
        assert_eq!(calibrated_argmax(&[5.0, 4.5], &c, 0.0).unwrap(), 0);
        assert_eq!(calibrated_argmax(&[5.0, 4.5], &c, 0.7).unwrap(), 1);
        assert!(calibrated_argmax(&[5.0, 4.5], &c, -1.0).is_err());
        // γ ≥ 2σ pushes every seen score below every unseen one
        let sigma = 20.0;
        assert_eq!(calibrated_argmax(&[sigma, -sigma + 1e-9], &c, 2.0 * sigma).unwrap(), 1);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn scores_are_bounded_by_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = classes(&[&[1.0, 2.0, 0.5], &[0.0, 1.0, 1.0], &[3.0, 0.1, 0.0]], &[0, 1], &[2]);
        for _ in 0..500 {
            let v = Tensor::from_fn(vec![4, 3], |_| rng.random_range(-2.0..2.0));
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = cosine_scores(&h, &v, &c, &[0, 1, 2], 25.0, ZeroVector::Lenient).unwrap();
            assert!(s.iter().all(|x| (-25.0..=25.0).contains(x)));
        }
    }

    #[test]
    fn cls_loss_gradient_through_projection_and_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let phi = Tensor::from_fn(vec![4, 3], |_| rng.random_range(0.1..1.0));
        let feats = Tensor::from_fn(vec![2, 5], |_| rng.random_range(-1.0..1.0));
        let v = Tensor::from_fn(vec![5, 3], |_| rng.random_range(-1.0..1.0));
        for similarity in [Similarity::Cosine, Similarity::Dot] {
            let report = finite_diff_check(
                |t, p| {
                    let sigma = t.leaf(Tensor::scalar(5.0));
                    let logits = logits_on_tape(t, p[0], p[1], &phi, similarity, sigma)?;
                    cls_loss(t, logits, &[3, 1])
                },
                &[feats.clone(), v.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{similarity:?}: {report:?}");
        }
    }

    #[test]
    fn tape_logits_match_inference_scores() {
        let c = classes(&[&[1.0, 2.0], &[2.0, 0.5], &[0.3, 0.3]], &[0, 1], &[2]);
        let v = Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3]).unwrap();
        let h = [0.7, -0.1, 1.3];
        let expected = cosine_scores(&h, &v, &c, &[0, 1, 2], 20.0, ZeroVector::Strict).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::matrix(1, 3, h.to_vec()).unwrap());
        let vv = tape.constant(v);
        let sigma = tape.constant(Tensor::scalar(20.0));
        let logits = logits_on_tape(&mut tape, hv, vv, c.attributes(), Similarity::Cosine, sigma).unwrap();
        for (a, b) in tape.value(logits).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
