use rand::seq::index;
use rand::Rng;

use super::ZslDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One training example of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub index: usize,
    pub label: usize,
    pub attributes: Vec<f64>,
    pub image: Tensor,
    /// `H×W×D`, present when the dataset carries gaze.
    pub gaze: Option<Tensor>,
}

/// Draws `m` distinct seen classes and `n` distinct training images of each.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &ZslDataset, m: usize, n: usize, rng: &mut R) -> Result<Vec<EpisodeItem>> {
    if m == 0 || n == 0 {
        return Err(Error::config("train.classes_per_episode", "episodes need M ≥ 1 and N ≥ 1"));
    }
    let by_class = dataset.train_by_class();
    let eligible: Vec<usize> = dataset
        .seen_classes
        .iter()
        .copied()
        .filter(|&c| by_class[c].len() >= n)
        .collect();
    if eligible.len() < m {
        return Err(Error::config(
            "train.classes_per_episode",
            format!(
                "{m} classes per episode requested but only {} seen classes have at least {n} training images",
                eligible.len()
            ),
        ));
    }
    let mut items = Vec::with_capacity(m * n);
    for ci in index::sample(rng, eligible.len(), m) {
        let class = eligible[ci];
        let pool = &by_class[class];
        for ii in index::sample(rng, pool.len(), n) {
            let idx = pool[ii];
            items.push(EpisodeItem {
                index: idx,
                label: class,
                attributes: dataset.attributes_of(class).to_vec(),
                image: dataset.image_tensor(idx),
                gaze: dataset.gaze.as_ref().map(|g| g.target(idx)),
            });
        }
    }
    Ok(items)
}
