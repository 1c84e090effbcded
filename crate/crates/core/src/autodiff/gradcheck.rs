use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed a discrete choice
    /// (argmax cell, assignment) recorded on the tape.
    pub excluded: usize,
    /// `(param, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Adds a unit error to the first analytic gradient coordinate. Only used
    /// to prove that the harness reports failures.
    pub corrupt: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            corrupt: false,
        }
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// coordinate of `params`, using central differences of width `step`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients(
        f,
        params,
        CheckOptions {
            step,
            ..CheckOptions::default()
        },
    )
}

pub fn check_gradients<F>(f: F, params: &[Tensor], options: CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::tracking_kinks();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((scalar_of(&tape, out)?, tape.selections().to_vec()))
    };

    let mut tape = Tape::tracking_kinks();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let base_choice = tape.selections().to_vec();
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    if options.corrupt {
        if let Some(first) = analytic.iter_mut().find_map(|g| g.first_mut()) {
            *first += 1.0;
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &g_ad) in grads.iter().enumerate() {
            let original = work[pi].data()[ci];
            work[pi].data_mut()[ci] = original + options.step;
            let (plus, plus_choice) = evaluate(&work)?;
            work[pi].data_mut()[ci] = original - options.step;
            let (minus, minus_choice) = evaluate(&work)?;
            work[pi].data_mut()[ci] = original;

            if plus_choice != base_choice || minus_choice != base_choice {
                report.excluded += 1;
                continue;
            }
            let g_fd = (plus - minus) / (2.0 * options.step);
            let err = relative_error(g_ad, g_fd);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if !value.is_scalar() {
        return Err(Error::usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}
