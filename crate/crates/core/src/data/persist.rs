use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Blob, GazeData, ZslDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Param};
use crate::train::TrainConfig;

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const GAZE: &str = "gaze.bin";
const TENSORS: &str = "tensors.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileInfo {
    bytes: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    image_size: [usize; 3],
    num_images: usize,
    class_names: Vec<String>,
    attribute_names: Vec<String>,
    class_attributes: Vec<Vec<f64>>,
    word_vectors: Vec<Vec<f64>>,
    seen_classes: Vec<usize>,
    unseen_classes: Vec<usize>,
    labels: Vec<usize>,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
    blobs: Vec<Vec<Blob>>,
    gaze: Option<GazeManifest>,
    files: BTreeMap<String, FileInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GazeManifest {
    grid: [usize; 2],
    channels: usize,
    sigma_blur: f64,
    fixations: Vec<Vec<Vec<[usize; 2]>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the tensor blob, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    files: BTreeMap<String, FileInfo>,
}

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Fails with the first tensor whose stored shape differs from `expected`'s layout.
    pub fn check_against(&self, expected: &ModelConfig) -> Result<()> {
        for ((name, shape, _), p) in expected.layout().iter().zip(self.params.iter()) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    stored: p.value.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        if expected.layout().len() != self.params.len() {
            return Err(Error::usage(format!(
                "checkpoint has {} tensors, the model expects {}",
                self.params.len(),
                expected.layout().len()
            )));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a `.tmp` sibling renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn file_info(bytes: &[u8]) -> FileInfo {
    FileInfo {
        bytes: bytes.len() as u64,
        crc32: crc32fast::hash(bytes),
    }
}

fn read_manifest<T: DeserializeOwned>(dir: &Path, format: &str, expected_version: u32) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let malformed = |message: String| Error::Manifest {
        path: path.clone(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(format) {
        return Err(malformed(format!("not a {format} manifest")));
    }
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| malformed("missing version".into()))?;
    if version != u64::from(expected_version) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: expected_version,
        });
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

fn read_blob(dir: &Path, name: &str, files: &BTreeMap<String, FileInfo>) -> Result<Vec<u8>> {
    let info = files.get(name).ok_or_else(|| Error::Manifest {
        path: dir.join(MANIFEST),
        message: format!("no entry for {name}"),
    })?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != info.bytes {
        return Err(Error::Truncated {
            file: name.into(),
            expected: info.bytes,
            found: bytes.len() as u64,
        });
    }
    let crc = crc32fast::hash(&bytes);
    if crc != info.crc32 {
        return Err(Error::Checksum {
            file: name.into(),
            expected: info.crc32,
            found: crc,
        });
    }
    Ok(bytes)
}

fn check_len(file: &str, bytes: &[u8], values: usize, width: usize) -> Result<()> {
    let expected = (values * width) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            file: file.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(())
}

fn to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect()
}

fn to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the dataset directory; the manifest is written last.
pub fn save_dataset(dataset: &ZslDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    create_dir(dir)?;
    let mut files = BTreeMap::new();
    let images = f32_bytes(&dataset.images);
    files.insert(IMAGES.to_string(), file_info(&images));
    write_atomic(&dir.join(IMAGES), &images)?;
    if let Some(g) = &dataset.gaze {
        let gaze = f32_bytes(&g.heatmaps);
        files.insert(GAZE.to_string(), file_info(&gaze));
        write_atomic(&dir.join(GAZE), &gaze)?;
    }
    let k = dataset.num_attributes();
    let manifest = DatasetManifest {
        format: "gemzsl-dataset".into(),
        version: DATASET_VERSION,
        image_size: dataset.image_size,
        num_images: dataset.num_images(),
        class_names: dataset.class_names.clone(),
        attribute_names: dataset.attribute_names.clone(),
        class_attributes: dataset.class_attributes.chunks(k).map(<[f64]>::to_vec).collect(),
        word_vectors: dataset.word_vectors.chunks(dataset.word_dim).map(<[f64]>::to_vec).collect(),
        seen_classes: dataset.seen_classes.clone(),
        unseen_classes: dataset.unseen_classes.clone(),
        labels: dataset.labels.clone(),
        train_indices: dataset.train_indices.clone(),
        test_indices: dataset.test_indices.clone(),
        blobs: dataset.blobs.clone(),
        gaze: dataset.gaze.as_ref().map(|g| GazeManifest {
            grid: [g.grid.0, g.grid.1],
            channels: g.channels,
            sigma_blur: g.sigma_blur,
            fixations: g
                .fixations
                .iter()
                .map(|img| img.iter().map(|ch| ch.iter().map(|&(r, c)| [r, c]).collect()).collect())
                .collect(),
        }),
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_dataset(dir: &Path) -> Result<ZslDataset> {
    let m: DatasetManifest = read_manifest(dir, "gemzsl-dataset", DATASET_VERSION)?;
    let images = read_blob(dir, IMAGES, &m.files)?;
    check_len(IMAGES, &images, m.num_images * m.image_size.iter().product::<usize>(), 4)?;
    let gaze = match m.gaze {
        Some(g) => {
            let bytes = read_blob(dir, GAZE, &m.files)?;
            check_len(GAZE, &bytes, m.num_images * g.channels * g.grid[0] * g.grid[1], 4)?;
            Some(GazeData {
                grid: (g.grid[0], g.grid[1]),
                channels: g.channels,
                sigma_blur: g.sigma_blur,
                heatmaps: to_f32(&bytes),
                fixations: g
                    .fixations
                    .into_iter()
                    .map(|img| img.into_iter().map(|ch| ch.into_iter().map(|[r, c]| (r, c)).collect()).collect())
                    .collect(),
            })
        }
        None => None,
    };
    let word_dim = m.word_vectors.first().map_or(0, Vec::len);
    let dataset = ZslDataset {
        image_size: m.image_size,
        images: to_f32(&images),
        labels: m.labels,
        class_names: m.class_names,
        attribute_names: m.attribute_names,
        class_attributes: m.class_attributes.concat(),
        word_vectors: m.word_vectors.concat(),
        word_dim,
        seen_classes: m.seen_classes,
        unseen_classes: m.unseen_classes,
        train_indices: m.train_indices,
        test_indices: m.test_indices,
        blobs: m.blobs,
        gaze,
    };
    dataset.validate().map_err(|e| Error::Manifest {
        path: dir.join(MANIFEST),
        message: e.to_string(),
    })?;
    Ok(dataset)
}

/// Writes parameter values followed by momentum buffers, in layout order.
pub fn save_checkpoint(checkpoint: &Checkpoint, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (prefix, momentum) in [("", false), ("momentum/", true)] {
        for p in checkpoint.params.iter() {
            let t = if momentum { &p.velocity } else { &p.value };
            tensors.push(TensorEntry {
                name: format!("{prefix}{}", p.name),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
    }
    let values = checkpoint
        .params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .chain(checkpoint.params.iter().flat_map(|p| p.velocity.data().iter().copied()));
    let blob = f64_bytes(values);
    let mut files = BTreeMap::new();
    files.insert(TENSORS.to_string(), file_info(&blob));
    write_atomic(&dir.join(TENSORS), &blob)?;
    let manifest = CheckpointManifest {
        format: "gemzsl-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        model: checkpoint.model.clone(),
        train: checkpoint.train.clone(),
        epoch: checkpoint.epoch,
        tensors,
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_manifest(dir, "gemzsl-checkpoint", CHECKPOINT_VERSION)?;
    let bytes = read_blob(dir, TENSORS, &m.files)?;
    let total: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    check_len(TENSORS, &bytes, total, 8)?;
    let values = to_f64(&bytes);
    let malformed = |message: String| Error::Manifest {
        path: dir.join(MANIFEST),
        message,
    };
    if !m.tensors.len().is_multiple_of(2) {
        return Err(malformed("tensor table must pair values with momentum buffers".into()));
    }
    let slice = |t: &TensorEntry| -> Result<Tensor> {
        let len: usize = t.shape.iter().product();
        let data = values
            .get(t.offset..t.offset + len)
            .ok_or_else(|| malformed(format!("tensor `{}` lies outside the blob", t.name)))?;
        Tensor::new(t.shape.clone(), data.to_vec())
    };
    let half = m.tensors.len() / 2;
    let mut params = Vec::with_capacity(half);
    for (value, momentum) in m.tensors[..half].iter().zip(&m.tensors[half..]) {
        if momentum.name != format!("momentum/{}", value.name) {
            return Err(malformed(format!("no momentum buffer for `{}`", value.name)));
        }
        params.push(Param {
            name: value.name.clone(),
            value: slice(value)?,
            velocity: slice(momentum)?,
        });
    }
    let params = ModelParams::from_parts(&m.model, params)?;
    Ok(Checkpoint {
        model: m.model,
        train: m.train,
        epoch: m.epoch,
        params,
    })
}
