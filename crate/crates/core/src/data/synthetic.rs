use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::heatmap::{default_blur, fixations_to_heatmap};
use super::{Blob, GazeData, ZslDataset};
use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.5;
const MAX_RESAMPLES: usize = 1000;
const PLACEMENT_TRIES: usize = 200;

/// Parameters of the synthetic attribute-blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    /// `K`
    pub attributes: usize,
    pub images_per_class: usize,
    /// `[H_img, W_img, ch]`; `ch` must be 3.
    pub image_size: [usize; 3],
    /// Probability that a class has a given attribute.
    pub attribute_density: f64,
    pub blob_radius: f64,
    pub color_seed: u64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    pub train_fraction: f64,
    pub word_dim: usize,
    pub with_gaze: bool,
    /// `D`
    pub gaze_maps: usize,
    /// Gaze map resolution; should match the encoder's feature grid.
    pub gaze_grid: [usize; 2],
    /// Defaults to `max(1, H/4)` grid cells.
    pub sigma_blur: Option<f64>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seen_classes: 20,
            unseen_classes: 5,
            attributes: 12,
            images_per_class: 40,
            image_size: [32, 32, 3],
            attribute_density: 0.4,
            blob_radius: 3.0,
            color_seed: 7,
            noise: 0.05,
            train_fraction: 0.8,
            word_dim: 50,
            with_gaze: true,
            gaze_maps: 3,
            gaze_grid: [4, 4],
            sigma_blur: None,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("data.{key}"), msg));
        if self.attributes < 2 {
            return bad("attributes", "need K ≥ 2");
        }
        if self.seen_classes < 2 {
            return bad("seen_classes", "need at least 2 seen classes");
        }
        if self.unseen_classes == 0 {
            return bad("unseen_classes", "need at least 1 unseen class");
        }
        if self.images_per_class < 2 {
            return bad("images_per_class", "need at least 2 images per class");
        }
        if self.image_size[2] != 3 {
            return bad("image_size", "images must have 3 color channels");
        }
        let min_side = self.image_size[0].min(self.image_size[1]) as f64;
        if !(self.blob_radius > 0.0 && 2.0 * self.blob_radius < min_side) {
            return bad("blob_radius", "blobs must fit inside the image");
        }
        if !(self.attribute_density > 0.0 && self.attribute_density < 1.0) {
            return bad("attribute_density", "must lie strictly between 0 and 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a nonnegative number");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", "must lie strictly between 0 and 1");
        }
        if self.word_dim == 0 {
            return bad("word_dim", "must be positive");
        }
        if self.with_gaze {
            if self.gaze_maps == 0 {
                return bad("gaze_maps", "must be positive");
            }
            if self.gaze_grid[0] == 0 || self.gaze_grid[1] == 0 {
                return bad("gaze_grid", "must be positive");
            }
            if let Some(s) = self.sigma_blur {
                if !(s > 0.0 && s.is_finite()) {
                    return bad("sigma_blur", "must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }
}

/// Deterministic attribute colors, well separated from each other and from the gray background.
pub fn attribute_colors(k: usize, color_seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(color_seed);
    let dist = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let gray = [BACKGROUND; 3];
    let mut min_dist = 0.5;
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(k);
    let mut failures = 0;
    while colors.len() < k {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        if dist(&c, &gray) >= 0.35 && colors.iter().all(|o| dist(&c, o) >= min_dist) {
            colors.push(c);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                min_dist *= 0.9;
            }
        }
    }
    colors
}

fn class_attribute_matrix(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>> {
    let k = cfg.attributes;
    for _ in 0..MAX_RESAMPLES {
        let mut rows: Vec<Vec<bool>> = Vec::with_capacity(cfg.num_classes());
        while rows.len() < cfg.num_classes() {
            let mut attempts = 0;
            let row = loop {
                let row: Vec<bool> = (0..k).map(|_| rng.random_bool(cfg.attribute_density)).collect();
                if row.iter().filter(|&&a| a).count() >= 2 && !rows.contains(&row) {
                    break row;
                }
                attempts += 1;
                if attempts >= MAX_RESAMPLES {
                    return Err(Error::Generation(format!(
                        "could not draw a distinct attribute vector for class {} after {MAX_RESAMPLES} attempts",
                        rows.len()
                    )));
                }
            };
            rows.push(row);
        }
        let covered = (0..k).all(|a| rows[..cfg.seen_classes].iter().any(|r| r[a]));
        if covered {
            return Ok(rows);
        }
    }
    Err(Error::Generation(format!(
        "no attribute matrix with every attribute present in a seen class after {MAX_RESAMPLES} attempts"
    )))
}

fn place_blobs(cfg: &GenConfig, active: &[usize], rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let r = cfg.blob_radius;
    let [h, w, _] = cfg.image_size;
    let min_sep = 2.0 * r + 1.0;
    let mut blobs: Vec<Blob> = Vec::with_capacity(active.len());
    for &attribute in active {
        // Keep the candidate farthest from existing blobs if no clear spot is found.
        let mut best = ((0.0, 0.0), f64::NEG_INFINITY);
        for _ in 0..PLACEMENT_TRIES {
            let candidate = (rng.random_range(r..=h as f64 - 1.0 - r), rng.random_range(r..=w as f64 - 1.0 - r));
            let gap = blobs
                .iter()
                .map(|b| ((b.row - candidate.0).powi(2) + (b.col - candidate.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if gap > best.1 {
                best = (candidate, gap);
            }
            if gap >= min_sep {
                break;
            }
        }
        let candidate = best.0;
        blobs.push(Blob {
            attribute,
            row: candidate.0,
            col: candidate.1,
            radius: r,
        });
    }
    blobs
}

fn render(cfg: &GenConfig, blobs: &[Blob], colors: &[[f64; 3]], rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let [h, w, ch] = cfg.image_size;
    for y in 0..h {
        for x in 0..w {
            let base = blobs
                .iter()
                .rev()
                .find(|b| (y as f64 - b.row).powi(2) + (x as f64 - b.col).powi(2) <= b.radius * b.radius)
                .map_or([BACKGROUND; 3], |b| colors[b.attribute]);
            for &level in base.iter().take(ch) {
                let noise: f64 = StandardNormal.sample(rng);
                out.push((level + cfg.noise * noise).clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Renders a seeded dataset of colored attribute blobs with optional gaze ground truth.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<ZslDataset> {
    cfg.validate()?;
    let k = cfg.attributes;
    let classes = cfg.num_classes();
    let colors = attribute_colors(k, cfg.color_seed);

    let mut class_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = class_attribute_matrix(cfg, &mut class_rng)?;
    let class_attributes: Vec<f64> = rows.iter().flatten().map(|&a| if a { 1.0 } else { 0.0 }).collect();

    let mut word_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    word_rng.set_stream(1);
    let mut word_vectors = Vec::with_capacity(k * cfg.word_dim);
    for _ in 0..k {
        let v: Vec<f64> = (0..cfg.word_dim).map(|_| StandardNormal.sample(&mut word_rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        word_vectors.extend(v.iter().map(|x| x / norm));
    }

    // Document frequency across seen classes ranks attribute distinctiveness.
    let frequency: Vec<usize> = (0..k)
        .map(|a| rows[..cfg.seen_classes].iter().filter(|r| r[a]).count())
        .collect();

    let per_class = cfg.images_per_class;
    let n_train = ((per_class as f64 * cfg.train_fraction).round() as usize).clamp(1, per_class - 1);
    let total = classes * per_class;
    let mut images = Vec::with_capacity(total * cfg.image_size.iter().product::<usize>());
    let mut labels = Vec::with_capacity(total);
    let mut blobs_ledger = Vec::with_capacity(total);
    let (mut train_indices, mut test_indices) = (Vec::new(), Vec::new());
    let grid = (cfg.gaze_grid[0], cfg.gaze_grid[1]);
    let sigma_blur = cfg.sigma_blur.unwrap_or_else(|| default_blur(grid.0));
    let mut heatmaps = Vec::new();
    let mut fixations = Vec::new();

    for (class, row) in rows.iter().enumerate() {
        let active: Vec<usize> = (0..k).filter(|&a| row[a]).collect();
        let mut ranked = active.clone();
        ranked.sort_by_key(|&a| (frequency[a], a));
        for i in 0..per_class {
            let index = labels.len();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2 + index as u64);
            let blobs = place_blobs(cfg, &active, &mut rng);
            render(cfg, &blobs, &colors, &mut rng, &mut images);
            if cfg.with_gaze {
                let mut per_channel = Vec::with_capacity(cfg.gaze_maps);
                for d in 0..cfg.gaze_maps {
                    let cells: Vec<(usize, usize)> = ranked
                        .get(d)
                        .and_then(|&a| blobs.iter().find(|b| b.attribute == a))
                        .map(|b| {
                            let r = (b.row * grid.0 as f64 / cfg.image_size[0] as f64) as usize;
                            let c = (b.col * grid.1 as f64 / cfg.image_size[1] as f64) as usize;
                            vec![(r.min(grid.0 - 1), c.min(grid.1 - 1))]
                        })
                        .unwrap_or_default();
                    let points: Vec<(f64, f64)> = cells.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
                    let map = fixations_to_heatmap(&points, grid, sigma_blur)?;
                    heatmaps.extend(map.data().iter().map(|&v| v as f32));
                    per_channel.push(cells);
                }
                fixations.push(per_channel);
            }
            blobs_ledger.push(blobs);
            labels.push(class);
            if class < cfg.seen_classes && i < n_train {
                train_indices.push(index);
            } else {
                test_indices.push(index);
            }
        }
    }

    let dataset = ZslDataset {
        image_size: cfg.image_size,
        images,
        labels,
        class_names: (0..classes).map(|c| format!("class_{c:02}")).collect(),
        attribute_names: (0..k).map(|a| format!("attribute_{a:02}")).collect(),
        class_attributes,
        word_vectors,
        word_dim: cfg.word_dim,
        seen_classes: (0..cfg.seen_classes).collect(),
        unseen_classes: (cfg.seen_classes..classes).collect(),
        train_indices,
        test_indices,
        blobs: blobs_ledger,
        gaze: cfg.with_gaze.then_some(GazeData {
            grid,
            channels: cfg.gaze_maps,
            sigma_blur,
            heatmaps,
            fixations,
        }),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_preset_counts() {
        let d = generate_synthetic(&GenConfig::default()).unwrap();
        assert_eq!(d.num_images(), 1000);
        assert_eq!(d.num_classes(), 25);
        assert_eq!(d.class_attributes.len(), 25 * 12);
        assert_eq!(d.seen_classes.len(), 20);
        assert_eq!(d.unseen_classes.len(), 5);
        assert_eq!(d.train_indices.len(), 20 * 32);
        assert_eq!(d.test_indices.len(), 20 * 8 + 5 * 40);
        let g = d.gaze.as_ref().unwrap();
        assert_eq!(g.heatmaps.len(), 1000 * 3 * 16);
    }

    #[test]
    fn same_seed_is_identical_and_different_seed_differs() {
        let cfg = GenConfig {
            images_per_class: 4,
            ..GenConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&GenConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn invariants_hold_on_ten_seeds() {
        for seed in 0..10 {
            let d = generate_synthetic(&GenConfig {
                images_per_class: 5,
                seed,
                ..GenConfig::default()
            })
            .unwrap();
            d.validate().unwrap();
            let k = d.num_attributes();
            for a in 0..k {
                assert!(d.seen_classes.iter().any(|&c| d.attributes_of(c)[a] == 1.0));
            }
            for c in 0..d.num_classes() {
                let row = d.attributes_of(c);
                assert!(row.iter().filter(|&&v| v == 1.0).count() >= 2);
                assert!((0..c).all(|o| d.attributes_of(o) != row));
            }
        }
    }

    #[test]
    fn rendered_blobs_carry_their_attribute_color() {
        let cfg = GenConfig::default();
        let d = generate_synthetic(&cfg).unwrap();
        let colors = attribute_colors(cfg.attributes, cfg.color_seed);
        let w = cfg.image_size[1];
        for (i, blobs) in d.blobs.iter().enumerate() {
            let label = d.labels[i];
            let active: Vec<usize> = (0..12).filter(|&a| d.attributes_of(label)[a] == 1.0).collect();
            let drawn: Vec<usize> = blobs.iter().map(|b| b.attribute).collect();
            assert_eq!(drawn, active);
            for b in blobs {
                let visible = (0..cfg.image_size[0] * w).any(|cell| {
                    let (y, x) = ((cell / w) as f64, (cell % w) as f64);
                    if (y - b.row).powi(2) + (x - b.col).powi(2) > b.radius * b.radius {
                        return false;
                    }
                    let px = &d.image(i)[cell * 3..cell * 3 + 3];
                    px.iter()
                        .zip(&colors[b.attribute])
                        .all(|(&p, &q)| (f64::from(p) - q).abs() < 6.0 * cfg.noise)
                });
                assert!(visible, "image {i} lacks the color of attribute {}", b.attribute);
            }
        }
    }

    #[test]
    fn gaze_channels_follow_rarest_attributes() {
        let d = generate_synthetic(&GenConfig::default()).unwrap();
        let g = d.gaze.as_ref().unwrap();
        let freq: Vec<usize> = (0..12)
            .map(|a| d.seen_classes.iter().filter(|&&c| d.attributes_of(c)[a] == 1.0).count())
            .collect();
        for i in (0..d.num_images()).step_by(37) {
            let mut ranked: Vec<usize> = d.blobs[i].iter().map(|b| b.attribute).collect();
            ranked.sort_by_key(|&a| (freq[a], a));
            for ch in 0..3 {
                match ranked.get(ch) {
                    Some(&a) => {
                        let b = d.blobs[i].iter().find(|b| b.attribute == a).unwrap();
                        let cell = ((b.row / 8.0) as usize, (b.col / 8.0) as usize);
                        assert_eq!(g.fixations[i][ch], vec![cell]);
                        let target = g.target(i);
                        assert_eq!(target.data()[(cell.0 * 4 + cell.1) * 3 + ch], 1.0);
                    }
                    None => assert!(g.fixations[i][ch].is_empty()),
                }
            }
        }
    }

    #[test]
    fn colors_are_separated() {
        let colors = attribute_colors(12, 7);
        for (i, a) in colors.iter().enumerate() {
            for b in &colors[..i] {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(d > 0.2);
            }
        }
    }

    #[test]
    fn impossible_distinct_rows_is_a_generation_error() {
        let cfg = GenConfig {
            attributes: 2,
            seen_classes: 2,
            unseen_classes: 1,
            images_per_class: 2,
            ..GenConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn rejects_invalid_config_with_key() {
        let cfg = GenConfig {
            attributes: 1,
            ..GenConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.attributes"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
