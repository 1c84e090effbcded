//! End-to-end finite-difference verification of every training loss through
//! both encoders on a small model with a 4×4 feature map.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, CheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::classifier::{self, Similarity};
use crate::encoders::{self, EncoderConfig};
use crate::error::Result;
use crate::gem;
use crate::model::{self, InputNorm, ModelConfig, ModelParams};

/// Maximum relative error accepted for every loss.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub loss: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

/// Model used by the suite: 16×16×3 input, two stages, `C = 4`, `K = 3`, `D = 2`.
pub fn suite_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: [16, 16, 3],
            stage_channels: vec![3, 4],
            kernel: 4,
            stride: 2,
            padding: 1,
            feature_channels: 4,
            word_dim: 5,
            word_hidden: 6,
        },
        attributes: 3,
        gaze_maps: 2,
        similarity: Similarity::Cosine,
        sigma: 5.0,
        learnable_sigma: false,
        input_norm: InputNorm::identity(3),
    }
}

struct Fixture {
    cfg: ModelConfig,
    params: Vec<Tensor>,
    images: Vec<Tensor>,
    words: Tensor,
    classes: Tensor,
    targets: Vec<usize>,
    gaze: Tensor,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = suite_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg, &mut rng)
        .iter()
        .map(|p| {
            // Nonzero biases keep every unit away from the ReLU kink at zero input.
            if p.name == "transition.weight" {
                // Attention maps sum to one, so the gaze head needs large weights to be well conditioned.
                Tensor::from_fn(p.value.shape().to_vec(), |_| rng.random_range(-8.0..8.0))
            } else if p.name.ends_with("bias") {
                Tensor::from_fn(p.value.shape().to_vec(), |_| rng.random_range(0.05..0.3))
            } else {
                p.value.clone()
            }
        })
        .collect();
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(vec![16, 16, 3], |_| rng.random_range(-1.0..1.0));
    let images = vec![image(&mut rng), image(&mut rng)];
    let words = Tensor::from_fn(vec![3, 5], |_| rng.random_range(-1.0..1.0));
    let classes = Tensor::matrix(3, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).expect("3×3");
    let gaze = Tensor::from_fn(vec![4, 4, 2], |_| rng.random_range(0.0..1.0));
    Fixture {
        cfg,
        params,
        images,
        words,
        classes,
        targets: vec![0, 2],
        gaze,
    }
}

type LossFn = fn(&Fixture, &mut Tape, &[Var]) -> Result<Var>;

fn branches(fx: &Fixture, tape: &mut Tape, vars: &[Var], image: usize) -> Result<model::ImageBranches> {
    let bound = model::bind_vars(tape, vars.to_vec(), &fx.cfg);
    let e = tape.constant(fx.words.clone());
    let queries = encoders::encode_words(tape, &bound.words, e)?;
    let x = tape.constant(fx.images[image].clone());
    model::forward_image(tape, &bound, &fx.cfg, x, queries, true)
}

fn cls(fx: &Fixture, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let bound = model::bind_vars(tape, vars.to_vec(), &fx.cfg);
    let mut globals = Vec::new();
    for image in &fx.images {
        let x = tape.constant(image.clone());
        let f = encoders::encode_image(tape, &bound.image, x, &fx.cfg.encoder)?;
        globals.push(encoders::pool_global(tape, f)?);
    }
    let h = tape.stack(&globals)?;
    let logits = classifier::logits_on_tape(tape, h, bound.projection, &fx.classes, fx.cfg.similarity, bound.sigma)?;
    classifier::cls_loss(tape, logits, &fx.targets)
}

fn dis(fx: &Fixture, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let out = branches(fx, tape, vars, 0)?;
    gem::distance_loss(tape, out.attention, false)
}

fn mse(fx: &Fixture, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let out = branches(fx, tape, vars, 1)?;
    gem::mse_loss(tape, out.attribute_scores, fx.classes.row(1))
}

fn gaze(fx: &Fixture, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let out = branches(fx, tape, vars, 0)?;
    gem::gaze_loss(tape, out.gaze.expect("gaze requested"), &fx.gaze)
}

/// Checks one loss with respect to every parameter except `held`, which stays
/// a constant on the tape.
fn check(fx: &Fixture, loss: LossFn, held: Option<usize>, options: CheckOptions) -> Result<GradCheckReport> {
    let free: Vec<Tensor> = fx
        .params
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != held)
        .map(|(_, p)| p.clone())
        .collect();
    check_gradients(
        |tape, vars| {
            let mut all = vars.to_vec();
            if let Some(i) = held {
                let c = tape.constant(fx.params[i].clone());
                all.insert(i, c);
            }
            loss(fx, tape, &all)
        },
        &free,
        options,
    )
}

/// Runs all four checks. `corrupt` perturbs one analytic gradient of every
/// check so that the failure path can be exercised.
pub fn run(corrupt: bool) -> Result<Vec<SuiteRow>> {
    run_with_seed(3, corrupt)
}

fn run_with_seed(seed: u64, corrupt: bool) -> Result<Vec<SuiteRow>> {
    let fx = fixture(seed);
    let options = CheckOptions {
        corrupt,
        ..CheckOptions::default()
    };
    // Attention is a softmax over cells, so a shift of the last encoder stage
    // shared by every cell leaves it unchanged. That bias has a zero gradient
    // under the attention losses and is only checked through L_CLS.
    let last_bias = Some(2 * fx.cfg.encoder.stage_channels.len() - 1);
    let losses: [(&'static str, LossFn, Option<usize>); 4] = [
        ("L_CLS", cls, None),
        ("L_Dis", dis, last_bias),
        ("L_MSE", mse, last_bias),
        ("L_Gaze", gaze, last_bias),
    ];
    let mut rows = Vec::with_capacity(losses.len());
    for (name, loss, held) in losses {
        let start = Instant::now();
        let report = check(&fx, loss, held, options)?;
        rows.push(SuiteRow {
            loss: name,
            report,
            elapsed: start.elapsed(),
        });
    }
    Ok(rows)
}
