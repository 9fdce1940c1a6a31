//! High-pass residual energy per patch and its robust (median/MAD) normalization.

use crate::error::{Error, Result};
use crate::grid::{PatchGrid, PatchMap};

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Normalized 1D Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid for any offset.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur of a row-major `height x width` block with reflected borders.
pub fn gaussian_blur_rect(block: &[f64], width: usize, height: usize, sigma: f64) -> Result<Vec<f64>> {
    if block.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{width}x{height} block with {} samples",
            block.len()
        )));
    }
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;

    let mut horizontal = vec![0.0; block.len()];
    for y in 0..height {
        let row = &block[y * width..(y + 1) * width];
        for x in 0..width {
            horizontal[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[reflect(x as i64 + k as i64 - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; block.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * horizontal[reflect(y as i64 + k as i64 - radius, height) * width + x])
                .sum();
        }
    }
    Ok(out)
}

pub fn gaussian_blur(patch: &[f64], size: usize, sigma: f64) -> Result<Vec<f64>> {
    gaussian_blur_rect(patch, size, size, sigma)
}

/// Mean absolute difference between a patch and its low-pass version.
pub fn residual_energy(patch: &[f64], blurred: &[f64]) -> Result<f64> {
    if patch.len() != blurred.len() {
        return Err(Error::DimensionMismatch(format!(
            "patch has {} samples, blurred has {}",
            patch.len(),
            blurred.len()
        )));
    }
    if patch.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let total: f64 = patch.iter().zip(blurred).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / patch.len() as f64)
}

/// Residual energy of every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualField {
    pub energies: PatchMap<f64>,
}

pub fn residual_field(grid: &PatchGrid, sigma: f64) -> Result<ResidualField> {
    let p = grid.patch_size();
    let energies = grid
        .iter()
        .map(|patch| {
            let blurred = gaussian_blur(&patch.pixels, p, sigma)?;
            residual_energy(&patch.pixels, &blurred)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualField {
        energies: PatchMap::from_vec(grid.rows(), grid.cols(), energies)?,
    })
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Median absolute deviation around the lower median (unscaled).
pub fn median_abs_deviation(values: &[f64]) -> Option<(f64, f64)> {
    let median = lower_median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
    Some((median, lower_median(&deviations)?))
}

/// Robust z-scores of residual energy, with the statistics used kept for audit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseScores {
    pub scores: PatchMap<f64>,
    pub median: f64,
    pub mad: f64,
    pub epsilon: f64,
}

pub fn noise_anomaly(field: &ResidualField, epsilon: f64) -> Result<NoiseScores> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    let (median, mad) =
        median_abs_deviation(field.energies.as_slice()).ok_or(Error::EmptyGrid)?;
    let scores = field.energies.map(|e| (e - median) / (mad + epsilon));
    Ok(NoiseScores {
        scores,
        median,
        mad,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use proptest::prelude::*;

    fn field(values: &[f64]) -> ResidualField {
        ResidualField {
            energies: PatchMap::from_vec(1, values.len(), values.to_vec()).unwrap(),
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let out = gaussian_blur(&vec![0.42; 256], 16, 1.0).unwrap();
        assert!(out.iter().all(|v| (v - 0.42).abs() < 1e-12));
        assert!(matches!(gaussian_blur(&[0.0; 4], 2, 0.0), Err(Error::NonPositiveSigma(_))));
        assert!(matches!(gaussian_blur(&[0.0; 4], 2, -1.0), Err(Error::NonPositiveSigma(_))));
    }

    #[test]
    fn impulse_recovers_center_weight() {
        let mut patch = vec![0.0; 256];
        patch[8 * 16 + 8] = 1.0;
        let out = gaussian_blur(&patch, 16, 1.0).unwrap();
        // direct 2D kernel evaluation over the 7x7 support
        let norm: f64 = (-3i32..=3)
            .flat_map(|y| (-3i32..=3).map(move |x| (-((x * x + y * y) as f64) / 2.0).exp()))
            .sum();
        assert!((out[8 * 16 + 8] - 1.0 / norm).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_is_near_identity() {
        let patch: Vec<f64> = (0..256).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
        let out = gaussian_blur(&patch, 16, 0.1).unwrap();
        assert!(patch.iter().zip(&out).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn wide_kernel_reflects_past_patch_edge() {
        let patch: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let out = gaussian_blur(&patch, 4, 5.0).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn residual_energy_cases() {
        let flat = vec![0.3; 64];
        assert_eq!(residual_energy(&flat, &flat).unwrap(), 0.0);
        let blurred = gaussian_blur(&flat, 8, 2.0).unwrap();
        assert!(residual_energy(&flat, &blurred).unwrap() < 1e-12);

        let checker: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect();
        let heavy = gaussian_blur(&checker, 8, 3.0).unwrap();
        let direct = checker.iter().zip(&heavy).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        let e = residual_energy(&checker, &heavy).unwrap();
        assert!(e > 0.1);
        assert_eq!(e, direct);
        assert!(residual_energy(&flat, &flat[..10]).is_err());
    }

    #[test]
    fn noise_anomaly_examples() {
        let s = noise_anomaly(&field(&[7.0; 6]), 1e-6).unwrap();
        assert!(s.scores.as_slice().iter().all(|&v| v == 0.0));

        let s = noise_anomaly(&field(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1e-6).unwrap();
        assert_eq!((s.median, s.mad), (3.0, 1.0));
        assert!((s.scores.as_slice()[4] - 97.0 / (1.0 + 1e-6)).abs() < 1e-9);

        let s = noise_anomaly(&field(&[0.0, 0.0]), 1e-6).unwrap();
        assert_eq!(s.scores.as_slice(), &[0.0, 0.0]);

        assert!(matches!(noise_anomaly(&field(&[]), 1e-6), Err(Error::EmptyGrid)));
        assert!(noise_anomaly(&field(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn lower_median_for_even_counts() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[]), None);
    }

    proptest! {
        #[test]
        fn shift_invariant_scores(values in proptest::collection::vec(0.0f64..1.0, 1..60), shift in -5.0f64..5.0) {
            let a = noise_anomaly(&field(&values), 1e-6).unwrap();
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let b = noise_anomaly(&field(&shifted), 1e-6).unwrap();
            for (x, y) in a.scores.as_slice().iter().zip(b.scores.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn positive_exactly_above_median(values in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let s = noise_anomaly(&field(&values), 1e-6).unwrap();
            if s.mad > 0.0 {
                prop_assert_eq!(lower_median(s.scores.as_slice()).unwrap(), 0.0);
                for (v, score) in values.iter().zip(s.scores.as_slice()) {
                    prop_assert_eq!(*v > s.median, *score > 0.0);
                }
            }
        }

        #[test]
        fn scale_preserves_ranking(values in proptest::collection::vec(0.0f64..1.0, 2..60), scale in 0.5f64..20.0) {
            let a = noise_anomaly(&field(&values), 1e-6).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let b = noise_anomaly(&field(&scaled), 1e-6).unwrap();
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(a.scores.as_slice()[i] <= a.scores.as_slice()[j]);
                        prop_assert!(b.scores.as_slice()[i] <= b.scores.as_slice()[j]);
                    }
                }
            }
        }
    }
}
