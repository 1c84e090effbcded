//! Accuracy and gaze metrics, and evaluation of a trained model on a dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::classifier::{self, ClassEmbeddings, Scorer, ZeroVector};
use crate::data::ZslDataset;
use crate::error::{Error, Result};
use crate::gem;
use crate::model::{ModelConfig, ModelParams, Predictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Zsl => "zsl",
            EvalMode::Gzsl => "gzsl",
        }
    }
}

/// Mean over classes in `class_set` (that have samples) of their top-1 accuracy.
pub fn per_class_top1(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dimension("per_class_top1", &[predictions.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for &class in class_set {
        let (mut n, mut correct) = (0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == class {
                n += 1;
                correct += usize::from(p == class);
            }
        }
        if n > 0 {
            total += correct as f64 / n as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::usage("no class of the evaluated set has test samples"));
    }
    Ok(total / counted as f64)
}

/// `2SU / (S + U)`, defined as 0 when `S + U = 0`.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

fn check_cells(op: &str, len: usize, fixations: &[usize]) -> Result<()> {
    if fixations.is_empty() {
        return Err(Error::usage(format!("{op} needs at least one fixation")));
    }
    if let Some(&c) = fixations.iter().find(|&&c| c >= len) {
        return Err(Error::usage(format!("{op}: fixation cell {c} outside a map of {len} cells")));
    }
    Ok(())
}

/// Rank statistic behind [`auc`]: `(2·correct_pairs + tied_pairs, 2·P·N)`.
pub fn auc_counts(saliency: &[f64], fixations: &[usize]) -> Result<(u64, u64)> {
    check_cells("auc", saliency.len(), fixations)?;
    let mut positive = vec![false; saliency.len()];
    for &c in fixations {
        positive[c] = true;
    }
    let p = positive.iter().filter(|&&x| x).count() as u64;
    let n = saliency.len() as u64 - p;
    if n == 0 {
        return Err(Error::usage("auc needs at least one non-fixated cell"));
    }
    if saliency.iter().any(|v| v.is_nan()) {
        return Err(Error::usage("auc: saliency contains NaN"));
    }
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[a].total_cmp(&saliency[b]));
    // Twice the 1-based average rank of each tie group, summed over positives.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && saliency[order[j]] == saliency[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&c| positive[c]).count() as u64;
        rank_sum2 += positives * (i as u64 + 1 + j as u64);
        i = j;
    }
    Ok((rank_sum2 - p * (p + 1), 2 * p * n))
}

/// ROC area with fixated cells as positives; ties count one half.
pub fn auc(saliency: &[f64], fixations: &[usize]) -> Result<f64> {
    let (num, den) = auc_counts(saliency, fixations)?;
    Ok(num as f64 / den as f64)
}

/// Mean z-scored saliency at the fixations (population standard deviation).
pub fn nss(saliency: &[f64], fixations: &[usize]) -> Result<f64> {
    check_cells("nss", saliency.len(), fixations)?;
    if saliency.iter().all(|&v| v == saliency[0]) {
        return Ok(0.0);
    }
    let n = saliency.len() as f64;
    let mean = saliency.iter().sum::<f64>() / n;
    let var = saliency.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok(fixations.iter().map(|&c| (saliency[c] - mean) / std).sum::<f64>() / fixations.len() as f64)
}

/// AUC and NSS of predicted gaze against one image's fixations, per ground-truth
/// channel, after Hungarian matching of channels. Channels without fixations are `None`.
pub fn gaze_scores(pred: &Tensor, target: &Tensor, fixations: &[Vec<usize>]) -> Result<ChannelScores> {
    let assignment = gem::match_gaze_channels(pred, target)?;
    let d = assignment.perm.len();
    let mut out = vec![None; d];
    for (p, &q) in assignment.perm.iter().enumerate() {
        if fixations[q].is_empty() {
            continue;
        }
        let map = pred.channel(p);
        out[q] = Some((auc(&map, &fixations[q])?, nss(&map, &fixations[q])?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGaze {
    pub channel: usize,
    pub auc: f64,
    pub nss: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    /// Per-class top-1 on unseen classes (ZSL).
    pub t1: Option<f64>,
    /// Seen-class accuracy (GZSL).
    pub seen: Option<f64>,
    /// Unseen-class accuracy (GZSL).
    pub unseen: Option<f64>,
    pub harmonic: Option<f64>,
    pub auc: Option<f64>,
    pub nss: Option<f64>,
    pub gaze_channels: Vec<ChannelGaze>,
    pub gamma: f64,
    pub sigma: f64,
    pub seed: Option<u64>,
    pub samples: usize,
    pub seen_samples: usize,
    pub unseen_samples: usize,
    /// Test samples assigned to a seen class.
    pub seen_predicted: usize,
}

impl MetricsReport {
    /// `(metric, value)` pairs in CSV order; accuracies as fractions.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        for (name, v) in [
            ("t1", self.t1),
            ("s", self.seen),
            ("u", self.unseen),
            ("h", self.harmonic),
            ("auc", self.auc),
            ("nss", self.nss),
        ] {
            if let Some(v) = v {
                rows.push((name.to_string(), v));
            }
        }
        for ch in &self.gaze_channels {
            rows.push((format!("auc_ch{}", ch.channel), ch.auc));
            rows.push((format!("nss_ch{}", ch.channel), ch.nss));
        }
        rows.push(("samples".into(), self.samples as f64));
        rows.push(("seen_predicted".into(), self.seen_predicted as f64));
        rows
    }
}

pub const CSV_HEADER: &str = "metric,value,mode,gamma,sigma,seed";

/// Renders reports as CSV with [`CSV_HEADER`].
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let seed = r.seed.map_or(String::new(), |s| s.to_string());
        for (metric, value) in r.rows() {
            let _ = writeln!(out, "{metric},{value},{},{},{},{seed}", r.mode.as_str(), r.gamma, r.sigma);
        }
    }
    out
}

/// Per ground-truth gaze channel `(auc, nss)`; `None` for a channel without fixations.
pub type ChannelScores = Vec<Option<(f64, f64)>>;

/// Class scores of every evaluated test image, plus gaze scores of unseen ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per image, one score per class id.
    pub scores: Vec<Vec<f64>>,
    /// Per image; `None` for seen-class images or without gaze ground truth.
    pub gaze: Vec<Option<ChannelScores>>,
    pub sigma: f64,
}

impl ScoreTable {
    /// Scores all test images using the model's own `σ`.
    pub fn build(dataset: &ZslDataset, params: &ModelParams, cfg: &ModelConfig) -> Result<Self> {
        Self::build_for(dataset, params, cfg, &dataset.test_indices, params.sigma(cfg))
    }

    pub fn build_for(
        dataset: &ZslDataset,
        params: &ModelParams,
        cfg: &ModelConfig,
        indices: &[usize],
        sigma: f64,
    ) -> Result<Self> {
        check_model_fits(dataset, cfg)?;
        let words = dataset.word_vectors()?;
        let classes = dataset.class_embeddings()?;
        let predictor = Predictor::new(params, cfg, &words)?;
        let scorer = Scorer {
            projection: params.projection(),
            classes: &classes,
            similarity: cfg.similarity,
            sigma,
            zero: ZeroVector::Lenient,
        };
        let gaze_data = dataset.gaze.as_ref().filter(|g| g.channels == cfg.gaze_maps);
        let mut table = ScoreTable {
            indices: indices.to_vec(),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            scores: Vec::with_capacity(indices.len()),
            gaze: Vec::with_capacity(indices.len()),
            sigma,
        };
        for &i in indices {
            let out = predictor.infer(&dataset.image_tensor(i))?;
            table.scores.push(scorer.scores(&out.global)?);
            let gaze = match gaze_data {
                Some(g) if !dataset.is_seen(dataset.labels[i]) => {
                    let fixations: Vec<Vec<usize>> = (0..g.channels).map(|c| g.fixation_cells(i, c)).collect();
                    Some(gaze_scores(out.gaze.tensor(), &g.target(i), &fixations)?)
                }
                _ => None,
            };
            table.gaze.push(gaze);
        }
        Ok(table)
    }

    /// Aggregates the table under one evaluation protocol.
    pub fn report(&self, dataset: &ZslDataset, mode: EvalMode, gamma: f64) -> Result<MetricsReport> {
        let classes = dataset.class_embeddings()?;
        self.report_with(&classes, mode, gamma)
    }

    pub fn report_with(&self, classes: &ClassEmbeddings, mode: EvalMode, gamma: f64) -> Result<MetricsReport> {
        let is_unseen: Vec<bool> = self.labels.iter().map(|&l| !classes.is_seen(l)).collect();
        let unseen_samples = is_unseen.iter().filter(|&&u| u).count();
        let seen_samples = self.labels.len() - unseen_samples;
        let mut report = MetricsReport {
            mode,
            t1: None,
            seen: None,
            unseen: None,
            harmonic: None,
            auc: None,
            nss: None,
            gaze_channels: Vec::new(),
            gamma,
            sigma: self.sigma,
            seed: None,
            samples: 0,
            seen_samples: 0,
            unseen_samples,
            seen_predicted: 0,
        };
        match mode {
            EvalMode::Zsl => {
                if unseen_samples == 0 {
                    return Err(Error::usage("zsl evaluation needs unseen-class test images"));
                }
                let (mut preds, mut labels) = (Vec::new(), Vec::new());
                for (row, (&l, _)) in self.scores.iter().zip(self.labels.iter().zip(&is_unseen)).filter(|(_, (_, &u))| u) {
                    preds.push(classifier::predict_among(row, classes.unseen())?);
                    labels.push(l);
                }
                report.t1 = Some(per_class_top1(&preds, &labels, classes.unseen())?);
                report.samples = unseen_samples;
            }
            EvalMode::Gzsl => {
                if unseen_samples == 0 || seen_samples == 0 {
                    return Err(Error::usage("gzsl evaluation needs both seen and unseen test images"));
                }
                let preds = self
                    .scores
                    .iter()
                    .map(|row| classifier::calibrated_argmax(row, classes, gamma))
                    .collect::<Result<Vec<_>>>()?;
                let s = per_class_top1(&preds, &self.labels, classes.seen())?;
                let u = per_class_top1(&preds, &self.labels, classes.unseen())?;
                report.seen = Some(s);
                report.unseen = Some(u);
                report.harmonic = Some(harmonic_mean(s, u));
                report.samples = self.labels.len();
                report.seen_samples = seen_samples;
                report.seen_predicted = preds.iter().filter(|&&p| classes.is_seen(p)).count();
            }
        }
        self.fill_gaze(&mut report);
        Ok(report)
    }

    fn fill_gaze(&self, report: &mut MetricsReport) {
        let mut per_channel: Vec<(f64, f64, usize)> = Vec::new();
        let (mut auc_sum, mut nss_sum, mut count) = (0.0, 0.0, 0usize);
        for channels in self.gaze.iter().flatten() {
            if per_channel.len() < channels.len() {
                per_channel.resize(channels.len(), (0.0, 0.0, 0));
            }
            for (q, v) in channels.iter().enumerate() {
                if let Some((a, n)) = v {
                    per_channel[q].0 += a;
                    per_channel[q].1 += n;
                    per_channel[q].2 += 1;
                    auc_sum += a;
                    nss_sum += n;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return;
        }
        report.auc = Some(auc_sum / count as f64);
        report.nss = Some(nss_sum / count as f64);
        report.gaze_channels = per_channel
            .into_iter()
            .enumerate()
            .filter(|(_, c)| c.2 > 0)
            .map(|(channel, (a, n, k))| ChannelGaze {
                channel,
                auc: a / k as f64,
                nss: n / k as f64,
                images: k,
            })
            .collect();
    }

    /// One generalized report per `γ`.
    pub fn sweep(&self, dataset: &ZslDataset, gammas: &[f64]) -> Result<Vec<MetricsReport>> {
        let classes = dataset.class_embeddings()?;
        gammas.iter().map(|&g| self.report_with(&classes, EvalMode::Gzsl, g)).collect()
    }
}

fn check_model_fits(dataset: &ZslDataset, cfg: &ModelConfig) -> Result<()> {
    if cfg.attributes != dataset.num_attributes() {
        return Err(Error::usage(format!(
            "model has {} attributes but the dataset has {}",
            cfg.attributes,
            dataset.num_attributes()
        )));
    }
    if cfg.encoder.input_size != dataset.image_size {
        return Err(Error::usage(format!(
            "model expects images of {:?} but the dataset has {:?}",
            cfg.encoder.input_size, dataset.image_size
        )));
    }
    Ok(())
}

/// Scores a model over the test split with the given protocol.
pub fn evaluate(
    dataset: &ZslDataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: EvalMode,
    sigma: f64,
    gamma: f64,
) -> Result<MetricsReport> {
    let indices = match mode {
        EvalMode::Zsl => dataset.test_indices_where(false),
        EvalMode::Gzsl => dataset.test_indices.clone(),
    };
    ScoreTable::build_for(dataset, params, cfg, &indices, sigma)?.report(dataset, mode, gamma)
}

/// Unseen-class accuracy used for per-epoch validation.
pub fn unseen_top1(dataset: &ZslDataset, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let report = evaluate(dataset, params, cfg, EvalMode::Zsl, params.sigma(cfg), 0.0)?;
    Ok(report.t1.unwrap_or(0.0))
}
