//! Total loss, SGD with momentum, and the episodic training loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::{self, Similarity};
use crate::data::{sample_episode, EpisodeItem, ZslDataset};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::gem;
use crate::metrics;
use crate::model::{self, BoundParams, InputNorm, ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `λ1`, distance loss weight.
    pub lambda_dis: f64,
    /// `λ2`, attribute regression weight.
    pub lambda_mse: f64,
    /// `λ3`, gaze loss weight; ignored unless `use_gaze`.
    pub lambda_gaze: f64,
    /// Cosine scale, or its starting value when learnable.
    pub sigma: f64,
    pub learnable_sigma: bool,
    /// Calibration constant applied at generalized evaluation.
    pub gamma: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `M`
    pub classes_per_episode: usize,
    /// `N`
    pub images_per_class: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_gaze: bool,
    pub similarity: Similarity,
    /// Divide the distance loss by `K`.
    pub distance_divide_by_k: bool,
    /// Report unseen-class accuracy after every epoch.
    pub validate_each_epoch: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_dis: 0.2,
            lambda_mse: 1.0,
            lambda_gaze: 0.1,
            sigma: 20.0,
            learnable_sigma: false,
            gamma: 0.7,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            classes_per_episode: 16,
            images_per_class: 2,
            batches_per_epoch: 300,
            epochs: 20,
            seed: 42,
            use_gaze: false,
            similarity: Similarity::Cosine,
            distance_divide_by_k: false,
            validate_each_epoch: true,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the synthetic dataset.
    pub fn synthetic() -> Self {
        TrainConfig {
            batches_per_epoch: 50,
            epochs: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("train.{key}"), msg));
        for (key, v) in [
            ("lambda_dis", self.lambda_dis),
            ("lambda_mse", self.lambda_mse),
            ("lambda_gaze", self.lambda_gaze),
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be a nonnegative number, got {v}"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        if self.classes_per_episode < 2 {
            return bad("classes_per_episode", "M must be at least 2".into());
        }
        if self.images_per_class < 1 {
            return bad("images_per_class", "N must be at least 1".into());
        }
        Ok(())
    }

    /// `λ3` as applied: zero when gaze ground truth is not used.
    pub fn effective_lambda_gaze(&self) -> f64 {
        if self.use_gaze {
            self.lambda_gaze
        } else {
            0.0
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            dis: self.lambda_dis,
            mse: self.lambda_mse,
            gaze: self.effective_lambda_gaze(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dis: f64,
    pub mse: f64,
    pub gaze: f64,
}

impl LossWeights {
    pub fn combine(&self, c: &LossComponents) -> f64 {
        c.cls + self.dis * c.dis + self.mse * c.mse + self.gaze * c.gaze
    }
}

/// Batch-mean value of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub dis: f64,
    pub mse: f64,
    pub gaze: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub components: LossComponents,
}

/// Builds the total loss of an episode on `tape`. Classes are the seen classes
/// (`seen_attributes` rows, in `seen_classes` order).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[EpisodeItem],
    words: &Tensor,
    seen_classes: &[usize],
    seen_attributes: &Tensor,
) -> Result<(Var, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let use_gaze = cfg.use_gaze;
    if use_gaze && batch.iter().any(|b| b.gaze.is_none()) {
        return Err(Error::usage(
            "gaze loss requested but the batch has no gaze ground truth; λ3 must be 0 when gaze is unavailable",
        ));
    }
    let weights = cfg.weights();
    let e = tape.constant(words.clone());
    let queries = encoders::encode_words(tape, &bound.words, e)?;

    let mut globals = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let (mut dis_terms, mut mse_terms, mut gaze_terms) = (Vec::new(), Vec::new(), Vec::new());
    for item in batch {
        let position = seen_classes
            .iter()
            .position(|&c| c == item.label)
            .ok_or_else(|| Error::usage(format!("batch label {} is not a seen class", item.label)))?;
        targets.push(position);
        let x = model::input(tape, model_cfg, &item.image);
        let out = model::forward_image(tape, bound, model_cfg, x, queries, use_gaze)?;
        globals.push(out.global);
        if weights.dis != 0.0 {
            dis_terms.push(gem::distance_loss(tape, out.attention, cfg.distance_divide_by_k)?);
        }
        if weights.mse != 0.0 {
            mse_terms.push(gem::mse_loss(tape, out.attribute_scores, &item.attributes)?);
        }
        if let (Some(g), Some(target)) = (out.gaze, &item.gaze) {
            gaze_terms.push(gem::gaze_loss(tape, g, target)?);
        }
    }

    let features = tape.stack(&globals)?;
    let logits = classifier::logits_on_tape(
        tape,
        features,
        bound.projection,
        seen_attributes,
        model_cfg.similarity,
        bound.sigma,
    )?;
    let cls = classifier::cls_loss(tape, logits, &targets)?;
    let mut total = cls;
    let mut components = LossComponents {
        cls: tape.value(cls).item(),
        ..LossComponents::default()
    };
    for (terms, weight, slot) in [
        (&dis_terms, weights.dis, &mut components.dis),
        (&mse_terms, weights.mse, &mut components.mse),
        (&gaze_terms, weights.gaze, &mut components.gaze),
    ] {
        if terms.is_empty() {
            continue;
        }
        let stacked = tape.stack(terms)?;
        let mean = tape.mean(stacked);
        *slot = tape.value(mean).item();
        if weight != 0.0 {
            let weighted = tape.scale(mean, weight);
            total = tape.add(total, weighted)?;
        }
    }
    let terms = LossTerms {
        total: tape.value(total).item(),
        components,
    };
    Ok((total, terms))
}

/// `v ← m·v + g + wd·w`, then `w ← w − lr·v`.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::usage(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::dimension("sgd_step", g.shape(), p.value.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numerical {
                name: p.name.clone(),
                message: "non-finite gradient".into(),
            });
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let w = p.value.data_mut();
        let v = p.velocity.data_mut();
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
        if !p.value.all_finite() {
            return Err(Error::Numerical {
                name: p.name.clone(),
                message: "parameter became non-finite after the update".into(),
            });
        }
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub dis: f64,
    pub mse: f64,
    pub gaze: f64,
    /// Unseen-class accuracy on the test split after this epoch.
    pub val_t1: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Model layout implied by a dataset, an encoder and a training configuration.
pub fn model_config(dataset: &ZslDataset, encoder: &EncoderConfig, cfg: &TrainConfig) -> ModelConfig {
    ModelConfig {
        encoder: encoder.clone(),
        attributes: dataset.num_attributes(),
        gaze_maps: dataset.gaze.as_ref().map_or(1, |g| g.channels),
        similarity: cfg.similarity,
        sigma: cfg.sigma,
        learnable_sigma: cfg.learnable_sigma,
        input_norm: InputNorm::fit(
            dataset.train_indices.iter().map(|&i| dataset.image(i)),
            dataset.image_size[2],
        ),
    }
}

/// Checks that dataset, encoder and training configuration fit together.
pub fn check_compatible(dataset: &ZslDataset, encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    encoder.validate()?;
    dataset.validate()?;
    if encoder.input_size != dataset.image_size {
        return Err(Error::config(
            "encoder.input_size",
            format!("{:?} does not match dataset images {:?}", encoder.input_size, dataset.image_size),
        ));
    }
    if encoder.word_dim != dataset.word_dim {
        return Err(Error::config(
            "encoder.word_dim",
            format!("{} does not match dataset word vectors of length {}", encoder.word_dim, dataset.word_dim),
        ));
    }
    if cfg.use_gaze {
        let Some(g) = &dataset.gaze else {
            return Err(Error::config(
                "train.use_gaze",
                "the dataset has no gaze ground truth; λ3 = 0 when gaze ground truth is not available",
            ));
        };
        let (h, w) = encoder.feature_grid()?;
        if g.grid != (h, w) {
            return Err(Error::config(
                "train.use_gaze",
                format!("gaze grid {:?} does not match the feature grid {:?}", g.grid, (h, w)),
            ));
        }
    }
    let by_class = dataset.train_by_class();
    let eligible = dataset
        .seen_classes
        .iter()
        .filter(|&&c| by_class[c].len() >= cfg.images_per_class)
        .count();
    if eligible < cfg.classes_per_episode {
        return Err(Error::config(
            "train.classes_per_episode",
            format!(
                "M = {} but only {eligible} seen classes have at least N = {} training images",
                cfg.classes_per_episode, cfg.images_per_class
            ),
        ));
    }
    Ok(())
}

/// Trains from a fresh seeded initialization.
pub fn train(dataset: &ZslDataset, encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_compatible(dataset, encoder, cfg)?;
    let model_cfg = model_config(dataset, encoder, cfg);
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(&model_cfg, &mut rng);
    train_from(dataset, model_cfg, params, cfg)
}

/// Continues training `params` for `cfg.epochs` epochs.
pub fn train_from(
    dataset: &ZslDataset,
    model_cfg: ModelConfig,
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_compatible(dataset, &model_cfg.encoder, cfg)?;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    episode_rng.set_stream(1);
    let words = dataset.word_vectors()?.tensor().clone();
    let classes = dataset.class_embeddings()?;
    let seen = dataset.seen_classes.clone();
    let seen_attributes = classes.subset(&seen);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch = sample_episode(dataset, cfg.classes_per_episode, cfg.images_per_class, &mut episode_rng)?;
            let mut tape = Tape::new();
            let bound = model::bind(&mut tape, &params, &model_cfg, true);
            let (loss, terms) = total_loss(&mut tape, &bound, &model_cfg, cfg, &batch, &words, &seen, &seen_attributes)?;
            if !terms.total.is_finite() {
                return Err(Error::Numerical {
                    name: "total_loss".into(),
                    message: format!("loss became {} in epoch {epoch}", terms.total),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
                .collect();
            sgd_step(&mut params, &grads, cfg)?;
            total_sum += terms.total;
            sums.cls += terms.components.cls;
            sums.dis += terms.components.dis;
            sums.mse += terms.components.mse;
            sums.gaze += terms.components.gaze;
        }
        let n = cfg.batches_per_epoch.max(1) as f64;
        let val_t1 = if cfg.validate_each_epoch {
            Some(metrics::unseen_top1(dataset, &params, &model_cfg)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            total: total_sum / n,
            cls: sums.cls / n,
            dis: sums.dis / n,
            mse: sums.mse / n,
            gaze: sums.gaze / n,
            val_t1,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, dis {:.4}, mse {:.4}, gaze {:.4}) val T1 {}",
            entry.total,
            entry.cls,
            entry.dis,
            entry.mse,
            entry.gaze,
            entry.val_t1.map_or("-".into(), |v| format!("{:.2}", 100.0 * v)),
        );
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: model_cfg,
        params,
        log,
    })
}
