//! Image encoder (strided conv stack → `H×W×C` feature map, plus its global
//! average) and the word encoder (one-hidden-layer MLP from attribute word
//! vectors to `K×C` visual queries).

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[height, width, channels]` of input images.
    pub input_size: [usize; 3],
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Width `C` of the feature map; must equal the last stage.
    pub feature_channels: usize,
    pub word_dim: usize,
    pub word_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: [32, 32, 3],
            stage_channels: vec![16, 32, 64],
            kernel: 4,
            stride: 2,
            padding: 1,
            feature_channels: 64,
            word_dim: 50,
            word_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("encoder.stage_channels", "at least one stage required"));
        }
        if self.stage_channels.contains(&0) || self.input_size.contains(&0) {
            return Err(Error::config("encoder", "sizes and channel counts must be positive"));
        }
        if self.stage_channels.last() != Some(&self.feature_channels) {
            return Err(Error::config(
                "encoder.feature_channels",
                format!(
                    "{} does not match the last stage width {:?}",
                    self.feature_channels,
                    self.stage_channels.last()
                ),
            ));
        }
        if self.word_dim == 0 || self.word_hidden == 0 {
            return Err(Error::config("encoder.word_dim", "word sizes must be positive"));
        }
        let (h, w) = self
            .feature_grid()
            .map_err(|e| Error::config("encoder", e.to_string()))?;
        if h * w < 2 {
            return Err(Error::config(
                "encoder",
                format!("feature map {h}×{w} leaves attention fewer than two cells"),
            ));
        }
        Ok(())
    }

    /// Spatial size `(H, W)` of the final feature map.
    pub fn feature_grid(&self) -> Result<(usize, usize)> {
        let mut shape = self.input_size.to_vec();
        for &c in &self.stage_channels {
            let geom = ConvGeometry::new(
                &shape,
                &[self.kernel, self.kernel, shape[2], c],
                self.stride,
                self.padding,
            )?;
            shape = vec![geom.out_h, geom.out_w, c];
        }
        Ok((shape[0], shape[1]))
    }

    /// Kernel shapes `kh×kw×Cin×Cout` of every stage, in order.
    pub fn stage_kernel_shapes(&self) -> Vec<[usize; 4]> {
        let mut cin = self.input_size[2];
        self.stage_channels
            .iter()
            .map(|&cout| {
                let shape = [self.kernel, self.kernel, cin, cout];
                cin = cout;
                shape
            })
            .collect()
    }
}

/// Attribute word embeddings, one row per attribute (`K×De`).
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors(Tensor);

impl WordVectors {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::dimension("word vectors", matrix.shape(), &[2]));
        }
        if !matrix.all_finite() {
            return Err(Error::usage("word vectors must be finite"));
        }
        Ok(WordVectors(matrix))
    }

    pub fn attributes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Tape handles for the conv stages: `(kernel, bias)` per stage.
#[derive(Clone, Debug)]
pub struct ImageEncoderVars {
    pub stages: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct WordEncoderVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Strided conv + bias + ReLU per stage.
pub fn encode_image(tape: &mut Tape, vars: &ImageEncoderVars, image: Var, cfg: &EncoderConfig) -> Result<Var> {
    if tape.shape(image) != cfg.input_size {
        return Err(Error::dimension("encode_image", tape.shape(image), &cfg.input_size));
    }
    let mut x = image;
    for &(kernel, bias) in &vars.stages {
        let conv = tape.conv2d(x, kernel, cfg.stride, cfg.padding)?;
        let shifted = tape.add_bias(conv, bias)?;
        x = tape.relu(shifted);
    }
    Ok(x)
}

/// Global feature `h(x)`: spatial mean of the feature map.
pub fn pool_global(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.global_avg_pool(features)
}

/// `De → hidden (ReLU) → C`, applied to each attribute row.
pub fn encode_words(tape: &mut Tape, vars: &WordEncoderVars, words: Var) -> Result<Var> {
    let hidden = tape.matmul(words, vars.hidden_weight)?;
    let hidden = tape.add_bias(hidden, vars.hidden_bias)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, vars.out_weight)?;
    tape.add_bias(out, vars.out_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind_image(tape: &mut Tape, cfg: &EncoderConfig, fill: impl Fn(usize) -> f64) -> ImageEncoderVars {
        let stages = cfg
            .stage_kernel_shapes()
            .into_iter()
            .map(|s| {
                let k = tape.constant(Tensor::from_fn(s.to_vec(), &fill));
                let b = tape.constant(Tensor::zeros(vec![s[3]]));
                (k, b)
            })
            .collect();
        ImageEncoderVars { stages }
    }

    fn bind_words(tape: &mut Tape, de: usize, hidden: usize, c: usize, fill: impl Fn(usize) -> f64) -> WordEncoderVars {
        WordEncoderVars {
            hidden_weight: tape.constant(Tensor::from_fn(vec![de, hidden], &fill)),
            hidden_bias: tape.constant(Tensor::full(vec![hidden], 0.05)),
            out_weight: tape.constant(Tensor::from_fn(vec![hidden, c], &fill)),
            out_bias: tape.constant(Tensor::full(vec![c], -0.02)),
        }
    }

    fn pseudo(i: usize) -> f64 {
        ((i * 7919 % 1013) as f64 / 1013.0 - 0.5) * 0.4
    }

    #[test]
    fn default_config_gives_4x4x64() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_grid().unwrap(), (4, 4));

        let mut tape = Tape::new();
        let vars = bind_image(&mut tape, &cfg, pseudo);
        let x = tape.constant(Tensor::from_fn(vec![32, 32, 3], |i| (i % 17) as f64 / 17.0));
        let f = encode_image(&mut tape, &vars, x, &cfg).unwrap();
        assert_eq!(tape.shape(f), &[4, 4, 64]);
    }

    #[test]
    fn config_rejects_bad_layouts() {
        let mut cfg = EncoderConfig {
            feature_channels: 32,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.feature_channels = 64;
        cfg.kernel = 3; // (32 + 2 - 3) is odd → non-integral output
        assert!(cfg.validate().is_err());
        let tiny = EncoderConfig {
            input_size: [8, 8, 3],
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_map_and_input_size_is_checked() {
        let cfg = EncoderConfig::default();
        let mut tape = Tape::new();
        let vars = bind_image(&mut tape, &cfg, |_| 0.0);
        let x = tape.constant(Tensor::full(vec![32, 32, 3], 0.8));
        let f = encode_image(&mut tape, &vars, x, &cfg).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));

        let wrong = tape.constant(Tensor::zeros(vec![16, 16, 3]));
        assert!(matches!(
            encode_image(&mut tape, &vars, wrong, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn encode_image_is_deterministic() {
        let cfg = EncoderConfig::default();
        let run = || {
            let mut tape = Tape::new();
            let vars = bind_image(&mut tape, &cfg, pseudo);
            let x = tape.constant(Tensor::from_fn(vec![32, 32, 3], |i| (i % 23) as f64 / 23.0));
            let f = encode_image(&mut tape, &vars, x, &cfg).unwrap();
            tape.value(f).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pool_global_call_site_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(vec![4, 4, 3], 1.5));
        let h = pool_global(&mut tape, c).unwrap();
        assert_eq!(tape.value(h).data(), &[1.5, 1.5, 1.5]);
        let m = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = pool_global(&mut tape, m).unwrap();
        assert_eq!(tape.value(h).data(), &[2.5]);
        let one = tape.constant(Tensor::new(vec![1, 1, 2], vec![-3.0, 8.0]).unwrap());
        let h = pool_global(&mut tape, one).unwrap();
        assert_eq!(tape.value(h).data(), &[-3.0, 8.0]);
    }

    #[test]
    fn translation_covariance_under_whole_stride_shift() {
        // single stride-2 stage, no padding: shifting the image by 2 pixels
        // shifts the feature map by one cell
        let cfg = EncoderConfig {
            input_size: [12, 12, 1],
            stage_channels: vec![3],
            kernel: 2,
            stride: 2,
            padding: 0,
            feature_channels: 3,
            ..Default::default()
        };
        let img = |dy: usize, dx: usize| {
            Tensor::from_fn(vec![12, 12, 1], move |i| {
                let (r, c) = (i / 12, i % 12);
                if (4 + dy..6 + dy).contains(&r) && (2 + dx..5 + dx).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let mut tape = Tape::new();
        let vars = bind_image(&mut tape, &cfg, |i| 0.3 + 0.1 * i as f64);
        let a = tape.constant(img(0, 0));
        let b = tape.constant(img(2, 2));
        let fa = encode_image(&mut tape, &vars, a, &cfg).unwrap();
        let fb = encode_image(&mut tape, &vars, b, &cfg).unwrap();
        let (va, vb) = (tape.value(fa).clone(), tape.value(fb).clone());
        for r in 0..5 {
            for c in 0..5 {
                for ch in 0..3 {
                    assert_eq!(va.data()[(r * 6 + c) * 3 + ch], vb.data()[((r + 1) * 6 + c + 1) * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn encode_words_shape_zero_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::from_fn(vec![5, 50], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let vars = bind_words(&mut tape, 50, 16, 64, pseudo);
        let ev = tape.constant(e.clone());
        let out = encode_words(&mut tape, &vars, ev).unwrap();
        assert_eq!(tape.shape(out), &[5, 64]);

        // row-wise: permuting attributes permutes outputs the same way
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(e.row(p));
        }
        let pv = tape.constant(Tensor::matrix(5, 50, permuted).unwrap());
        let pout = encode_words(&mut tape, &vars, pv).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(tape.value(pout).row(i), tape.value(out).row(p));
        }

        let zero = WordEncoderVars {
            hidden_weight: tape.constant(Tensor::zeros(vec![50, 16])),
            hidden_bias: tape.constant(Tensor::zeros(vec![16])),
            out_weight: tape.constant(Tensor::zeros(vec![16, 64])),
            out_bias: tape.constant(Tensor::zeros(vec![64])),
        };
        let z = encode_words(&mut tape, &zero, ev).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let short = tape.constant(Tensor::zeros(vec![5, 40]));
        assert!(encode_words(&mut tape, &vars, short).is_err());
    }

    #[test]
    fn gradients_through_both_encoders() {
        let cfg = EncoderConfig {
            input_size: [8, 8, 2],
            stage_channels: vec![3, 4],
            kernel: 2,
            stride: 2,
            padding: 0,
            feature_channels: 4,
            word_dim: 5,
            word_hidden: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand = |shape: Vec<usize>| Tensor::from_fn(shape, |_| rng.random_range(-0.8..0.8));
        let image = rand(vec![8, 8, 2]);
        let words = rand(vec![3, 5]);
        let mut params = Vec::new();
        for s in cfg.stage_kernel_shapes() {
            params.push(rand(s.to_vec()));
            params.push(rand(vec![s[3]]));
        }
        params.extend([rand(vec![5, 6]), rand(vec![6]), rand(vec![6, 4]), rand(vec![4])]);

        let report = finite_diff_check(
            |tape, p| {
                let vars = ImageEncoderVars {
                    stages: vec![(p[0], p[1]), (p[2], p[3])],
                };
                let wv = WordEncoderVars {
                    hidden_weight: p[4],
                    hidden_bias: p[5],
                    out_weight: p[6],
                    out_bias: p[7],
                };
                let x = tape.constant(image.clone());
                let f = encode_image(tape, &vars, x, &cfg)?;
                let h = pool_global(tape, f)?;
                let e = tape.constant(words.clone());
                let q = encode_words(tape, &wv, e)?;
                let h2 = tape.reshape(h, &[4, 1])?;
                let s = tape.matmul(q, h2)?;
                let s = tape.sigmoid(s);
                Ok(tape.sum(s))
            },
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
