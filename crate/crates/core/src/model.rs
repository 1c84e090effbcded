//! Parameter store and the shared forward pass: image encoder → global
//! feature and attribute attention → attribute scores and gaze maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::Similarity;
use crate::encoders::{self, EncoderConfig, ImageEncoderVars, WordEncoderVars, WordVectors};
use crate::error::{Error, Result};
use crate::gem::{self, AttentionMaps, GazeMaps};

/// Per-channel standardization applied to pixels before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation of each channel over `images`
    /// (each `H×W×channels`). A constant channel keeps unit scale.
    pub fn fit<'a>(images: impl Iterator<Item = &'a [f32]>, channels: usize) -> Self {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        for image in images {
            for px in image.chunks_exact(channels) {
                for (c, &v) in px.iter().enumerate() {
                    let v = f64::from(v);
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return InputNorm::identity(channels);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        InputNorm { mean, std }
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let ch = self.mean.len();
        Tensor::from_fn(image.shape().to_vec(), |i| {
            let c = i % ch;
            (image.data()[i] - self.mean[c]) / self.std[c]
        })
    }
}

/// Everything needed to rebuild the parameter layout and the scoring rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// `K`
    pub attributes: usize,
    /// `D`
    pub gaze_maps: usize,
    pub similarity: Similarity,
    /// Initial (or fixed) cosine scale `σ`.
    pub sigma: f64,
    pub learnable_sigma: bool,
    pub input_norm: InputNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let channels = self.encoder.input_size[2];
        let norm = &self.input_norm;
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::config("model.input_norm", format!("needs {channels} channels")));
        }
        if norm.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || norm.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("model.input_norm", "scales must be positive and finite"));
        }
        if self.attributes == 0 {
            return Err(Error::config("model.attributes", "need at least one attribute"));
        }
        if self.gaze_maps == 0 {
            return Err(Error::config("data.gaze_maps", "need at least one gaze map"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("train.sigma", format!("must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `(name, shape, is_bias)` for every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let e = &self.encoder;
        let c = e.feature_channels;
        let mut out = Vec::new();
        for (i, shape) in e.stage_kernel_shapes().into_iter().enumerate() {
            out.push((format!("encoder.stage{i}.weight"), shape.to_vec(), false));
            out.push((format!("encoder.stage{i}.bias"), vec![shape[3]], true));
        }
        out.push(("words.hidden.weight".into(), vec![e.word_dim, e.word_hidden], false));
        out.push(("words.hidden.bias".into(), vec![e.word_hidden], true));
        out.push(("words.out.weight".into(), vec![e.word_hidden, c], false));
        out.push(("words.out.bias".into(), vec![c], true));
        out.push(("projection".into(), vec![c, self.attributes], false));
        out.push(("transition.weight".into(), vec![self.attributes, self.gaze_maps], false));
        out.push(("transition.bias".into(), vec![self.gaze_maps], true));
        if self.learnable_sigma {
            out.push(("sigma".into(), vec![1], true));
        }
        out
    }
}

/// Glorot-uniform fan sizes for a weight shape.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [rows, cols] => (*rows, *cols),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Momentum buffer, same shape as `value`.
    pub velocity: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero, `σ` at its configured start.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let params = cfg
            .layout()
            .into_iter()
            .map(|(name, shape, is_bias)| {
                let value = if name == "sigma" {
                    Tensor::scalar(cfg.sigma)
                } else if is_bias {
                    Tensor::zeros(shape.clone())
                } else {
                    let (fan_in, fan_out) = fans(&shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape.clone(), |_| rng.random_range(-limit..limit))
                };
                Param {
                    name,
                    velocity: Tensor::zeros(shape),
                    value,
                }
            })
            .collect();
        ModelParams { params }
    }

    /// Assembles parameters from stored tensors, checking them against the layout.
    pub fn from_parts(cfg: &ModelConfig, params: Vec<Param>) -> Result<Self> {
        let layout = cfg.layout();
        if layout.len() != params.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name {
                return Err(Error::usage(format!("expected tensor `{name}`, found `{}`", p.name)));
            }
            for t in [&p.value, &p.velocity] {
                if t.shape() != shape.as_slice() {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        stored: t.shape().to_vec(),
                        expected: shape.clone(),
                    });
                }
            }
        }
        Ok(ModelParams { params })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn projection(&self) -> &Tensor {
        self.get("projection").expect("projection is always present")
    }

    /// Current cosine scale: the learned value when trainable, else the configured one.
    pub fn sigma(&self, cfg: &ModelConfig) -> f64 {
        self.get("sigma").map_or(cfg.sigma, Tensor::item)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    /// Every parameter, in layout order.
    pub vars: Vec<Var>,
    pub image: ImageEncoderVars,
    pub words: WordEncoderVars,
    pub projection: Var,
    pub transition_weight: Var,
    pub transition_bias: Var,
    pub sigma: Var,
}

pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig, trainable: bool) -> BoundParams {
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect();
    bind_vars(tape, vars, cfg)
}

/// Names tape variables already holding every parameter in layout order.
pub fn bind_vars(tape: &mut Tape, vars: Vec<Var>, cfg: &ModelConfig) -> BoundParams {
    let stages = cfg.encoder.stage_channels.len();
    let image = ImageEncoderVars {
        stages: (0..stages).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
    };
    let w = 2 * stages;
    let words = WordEncoderVars {
        hidden_weight: vars[w],
        hidden_bias: vars[w + 1],
        out_weight: vars[w + 2],
        out_bias: vars[w + 3],
    };
    let sigma = if cfg.learnable_sigma {
        vars[w + 7]
    } else {
        tape.constant(Tensor::scalar(cfg.sigma))
    };
    BoundParams {
        image,
        words,
        projection: vars[w + 4],
        transition_weight: vars[w + 5],
        transition_bias: vars[w + 6],
        sigma,
        vars,
    }
}

/// Tape handles for one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImageBranches {
    /// `f(x)`, `H×W×C`
    pub features: Var,
    /// `h(x)`, `C`
    pub global: Var,
    /// `A(x)`, `H×W×K`
    pub attention: Var,
    /// `a(x)`, `K`
    pub attribute_scores: Var,
    /// `g(x)`, `H×W×D`
    pub gaze: Option<Var>,
}

/// Places a standardized copy of `image` on the tape.
pub fn input(tape: &mut Tape, cfg: &ModelConfig, image: &Tensor) -> Var {
    tape.constant(cfg.input_norm.apply(image))
}

/// Runs encoder, attention and localization for one image (already standardized). `queries` is the
/// word-encoder output `E(e)` shared by every image on the tape.
pub fn forward_image(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
    queries: Var,
    with_gaze: bool,
) -> Result<ImageBranches> {
    let features = encoders::encode_image(tape, &bound.image, image, &cfg.encoder)?;
    let global = encoders::pool_global(tape, features)?;
    let attention = gem::attention(tape, queries, features)?;
    let attribute_scores = gem::localize_attributes(tape, attention)?;
    let gaze = if with_gaze {
        Some(gem::attention_transition(
            tape,
            attention,
            bound.transition_weight,
            bound.transition_bias,
        )?)
    } else {
        None
    };
    Ok(ImageBranches {
        features,
        global,
        attention,
        attribute_scores,
        gaze,
    })
}

/// Converts a stored image (`H×W×ch`, `f32`) into a tensor.
pub fn image_tensor(size: [usize; 3], pixels: &[f32]) -> Result<Tensor> {
    Tensor::new(size.to_vec(), pixels.iter().map(|&v| f64::from(v)).collect())
}

/// Forward-only outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub global: Vec<f64>,
    pub attention: AttentionMaps,
    pub attribute_scores: Vec<f64>,
    pub gaze: GazeMaps,
}

/// Runs frozen parameters over images without recording gradients.
pub struct Predictor<'a> {
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    words: &'a WordVectors,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig, words: &'a WordVectors) -> Result<Self> {
        if words.attributes() != cfg.attributes || words.dim() != cfg.encoder.word_dim {
            return Err(Error::dimension(
                "word vectors",
                words.tensor().shape(),
                &[cfg.attributes, cfg.encoder.word_dim],
            ));
        }
        Ok(Predictor { params, cfg, words })
    }

    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, self.params, self.cfg, false);
        let e = tape.constant(self.words.tensor().clone());
        let queries = encoders::encode_words(&mut tape, &bound.words, e)?;
        let x = input(&mut tape, self.cfg, image);
        let out = forward_image(&mut tape, &bound, self.cfg, x, queries, true)?;
        let gaze = out.gaze.expect("gaze requested");
        Ok(Inference {
            global: tape.value(out.global).data().to_vec(),
            attention: AttentionMaps::new(tape.value(out.attention).clone())?,
            attribute_scores: tape.value(out.attribute_scores).data().to_vec(),
            gaze: GazeMaps::new(tape.value(gaze).clone())?,
        })
    }
}
