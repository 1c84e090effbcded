//! Datasets: the in-memory representation, a synthetic generator, episode
//! sampling, fixation heatmaps and on-disk persistence.

mod episode;
mod heatmap;
mod persist;
mod synthetic;

pub use episode::{sample_episode, EpisodeItem};
pub use heatmap::{default_blur, fixations_to_heatmap};
pub use persist::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, Checkpoint, CHECKPOINT_VERSION,
    DATASET_VERSION,
};
pub use synthetic::{attribute_colors, generate_synthetic, GenConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::classifier::ClassEmbeddings;
use crate::encoders::WordVectors;
use crate::error::{Error, Result};

/// One rendered attribute blob, in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub attribute: usize,
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

/// Gaze ground truth at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeData {
    /// `(H, W)`
    pub grid: (usize, usize),
    /// `D`
    pub channels: usize,
    pub sigma_blur: f64,
    /// `Nimg × D × H × W`
    pub heatmaps: Vec<f32>,
    /// Per image, per channel: fixated cells as `(row, col)`.
    pub fixations: Vec<Vec<Vec<(usize, usize)>>>,
}

impl GazeData {
    fn map_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Ground-truth maps of one image laid out as `H×W×D`.
    pub fn target(&self, image: usize) -> Tensor {
        let (h, w) = self.grid;
        let d = self.channels;
        let base = image * d * h * w;
        Tensor::from_fn(vec![h, w, d], |i| {
            let (cell, ch) = (i / d, i % d);
            f64::from(self.heatmaps[base + ch * h * w + cell])
        })
    }

    /// Fixations of one channel as flat cell indices.
    pub fn fixation_cells(&self, image: usize, channel: usize) -> Vec<usize> {
        self.fixations[image][channel]
            .iter()
            .map(|&(r, c)| r * self.grid.1 + c)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZslDataset {
    /// `[H_img, W_img, ch]`
    pub image_size: [usize; 3],
    /// `Nimg × H_img × W_img × ch`, row-major.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    /// `Φ`, `#classes × K` row-major.
    pub class_attributes: Vec<f64>,
    /// `K × De` row-major.
    pub word_vectors: Vec<f64>,
    pub word_dim: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Per image, the blobs the generator drew (empty when unknown).
    pub blobs: Vec<Vec<Blob>>,
    pub gaze: Option<GazeData>,
}

impl ZslDataset {
    pub fn num_images(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.image_size.iter().product()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn image_tensor(&self, index: usize) -> Tensor {
        Tensor::from_fn(self.image_size.to_vec(), |i| f64::from(self.image(index)[i]))
    }

    pub fn attributes_of(&self, class: usize) -> &[f64] {
        let k = self.num_attributes();
        &self.class_attributes[class * k..(class + 1) * k]
    }

    pub fn class_embeddings(&self) -> Result<ClassEmbeddings> {
        let phi = Tensor::new(
            vec![self.num_classes(), self.num_attributes()],
            self.class_attributes.clone(),
        )?;
        ClassEmbeddings::new(phi, self.seen_classes.clone(), self.unseen_classes.clone())
    }

    pub fn word_vectors(&self) -> Result<WordVectors> {
        WordVectors::new(Tensor::new(
            vec![self.num_attributes(), self.word_dim],
            self.word_vectors.clone(),
        )?)
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.contains(&class)
    }

    /// Training indices grouped by class id.
    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for &i in &self.train_indices {
            out[self.labels[i]].push(i);
        }
        out
    }

    /// Test indices whose label is in the given side of the split.
    pub fn test_indices_where(&self, seen: bool) -> Vec<usize> {
        self.test_indices
            .iter()
            .copied()
            .filter(|&i| self.is_seen(self.labels[i]) == seen)
            .collect()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_images();
        let classes = self.num_classes();
        let k = self.num_attributes();
        let fail = |m: String| Err(Error::usage(m));
        if self.images.len() != n * self.image_len() {
            return fail(format!("{} pixels for {n} images of size {:?}", self.images.len(), self.image_size));
        }
        if self.class_attributes.len() != classes * k {
            return fail(format!("attribute matrix has {} entries, expected {classes}×{k}", self.class_attributes.len()));
        }
        if self.word_vectors.len() != k * self.word_dim {
            return fail(format!("word vectors have {} entries, expected {k}×{}", self.word_vectors.len(), self.word_dim));
        }
        if self.class_attributes.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("class attributes must lie in [0, 1]".into());
        }
        self.class_embeddings()?;
        if self.seen_classes.len() + self.unseen_classes.len() != classes {
            return fail("every class must be either seen or unseen".into());
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= classes) {
            return fail(format!("label {l} outside {classes} classes"));
        }
        let mut used = vec![false; n];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= n || std::mem::replace(&mut used[i], true) {
                return fail(format!("image index {i} is out of range or listed twice"));
            }
        }
        if let Some(&i) = self.train_indices.iter().find(|&&i| !self.is_seen(self.labels[i])) {
            return fail(format!("training image {i} has unseen label {}", self.labels[i]));
        }
        if !self.blobs.is_empty() && self.blobs.len() != n {
            return fail(format!("blob ledger covers {} of {n} images", self.blobs.len()));
        }
        if let Some(g) = &self.gaze {
            if g.heatmaps.len() != n * g.channels * g.map_len() || g.fixations.len() != n {
                return fail("gaze data does not cover every image".into());
            }
            for map in g.heatmaps.chunks(g.map_len()) {
                let max = map.iter().copied().fold(0.0f32, f32::max);
                if map.iter().any(|v| !(0.0..=1.0).contains(v)) || (max != 0.0 && max != 1.0) {
                    return fail("gaze heatmaps must lie in [0, 1] with max 1 when nonempty".into());
                }
            }
            for (i, per_image) in g.fixations.iter().enumerate() {
                if per_image.len() != g.channels
                    || per_image.iter().flatten().any(|&(r, c)| r >= g.grid.0 || c >= g.grid.1)
                {
                    return fail(format!("fixations of image {i} do not fit the gaze grid"));
                }
            }
        }
        Ok(())
    }
}
