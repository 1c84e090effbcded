use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Blur width in grid cells for a map of height `h`.
pub fn default_blur(h: usize) -> f64 {
    (h as f64 / 4.0).max(1.0)
}

/// Sums an isotropic Gaussian per point over an `H×W` grid and rescales to max 1.
pub fn fixations_to_heatmap(points: &[(f64, f64)], grid: (usize, usize), sigma_blur: f64) -> Result<Tensor> {
    let (h, w) = grid;
    if !(sigma_blur > 0.0 && sigma_blur.is_finite()) {
        return Err(Error::usage(format!("blur width must be positive, got {sigma_blur}")));
    }
    for &(r, c) in points {
        let inside = (0.0..=(h as f64 - 1.0)).contains(&r) && (0.0..=(w as f64 - 1.0)).contains(&c);
        if !inside {
            return Err(Error::usage(format!("fixation ({r}, {c}) lies outside the {h}×{w} grid")));
        }
    }
    let denom = 2.0 * sigma_blur * sigma_blur;
    let mut map = Tensor::from_fn(vec![h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        points
            .iter()
            .map(|&(r, c)| (-((y - r).powi(2) + (x - c).powi(2)) / denom).exp())
            .sum()
    });
    let max = map.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_fixation_peaks_at_its_cell() {
        let map = fixations_to_heatmap(&[(2.0, 1.0)], (4, 4), 1.0).unwrap();
        assert_eq!(map.data()[2 * 4 + 1], 1.0);
        assert!(map.data().iter().enumerate().all(|(i, &v)| i == 9 || v < 1.0));
        assert!((map.data()[2 * 4 + 2] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn no_fixations_give_zero_map() {
        let map = fixations_to_heatmap(&[], (3, 5), 1.0).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separated_fixations_give_two_local_maxima() {
        let map = fixations_to_heatmap(&[(0.0, 0.0), (7.0, 7.0)], (8, 8), 1.0).unwrap();
        let at = |r: usize, c: usize| map.data()[r * 8 + c];
        assert_eq!(at(0, 0), 1.0);
        assert_eq!(at(7, 7), 1.0);
        for (r, c) in [(0, 0), (7, 7)] {
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (0..8).contains(&nr) && (0..8).contains(&nc) {
                    assert!(at(nr as usize, nc as usize) < at(r, c));
                }
            }
        }
        assert!(at(3, 4) < 0.01);
    }

    #[test]
    fn rejects_out_of_grid_points_and_bad_blur() {
        assert!(fixations_to_heatmap(&[(4.0, 0.0)], (4, 4), 1.0).is_err());
        assert!(fixations_to_heatmap(&[(0.0, -0.5)], (4, 4), 1.0).is_err());
        assert!(fixations_to_heatmap(&[(0.0, 0.0)], (4, 4), 0.0).is_err());
    }

    #[test]
    fn default_blur_floor_is_one() {
        assert_eq!(default_blur(4), 1.0);
        assert_eq!(default_blur(2), 1.0);
        assert_eq!(default_blur(14), 3.5);
    }

    proptest! {
        #[test]
        fn heatmap_in_unit_range_with_max_one(
            pts in prop::collection::vec((0.0f64..5.0, 0.0f64..6.0), 1..6),
            blur in 0.3f64..4.0,
        ) {
            let map = fixations_to_heatmap(&pts, (6, 7), blur).unwrap();
            let max = map.data().iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(max, 1.0);
            prop_assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
