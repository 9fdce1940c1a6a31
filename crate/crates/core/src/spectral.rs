//! Per-patch DCT band-energy distributions and the Jensen-Shannon frequency anomaly score.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{PatchGrid, PatchMap};

pub const DEFAULT_BANDS: usize = 8;

/// Orthonormal DCT-II basis of length `n`; row `k` is the k-th cosine.
#[derive(Clone, Debug)]
pub struct DctBasis {
    n: usize,
    rows: Vec<f64>,
}

impl DctBasis {
    pub fn new(n: usize) -> Self {
        let mut rows = vec![0.0; n * n];
        for k in 0..n {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                rows[k * n + i] = scale * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        Self { n, rows }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn at(&self, k: usize, i: usize) -> f64 {
        self.rows[k * self.n + i]
    }
}

/// Forward 2D DCT of a `height x width` row-major block.
pub fn dct2_rect(block: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(block.len(), width * height, "block size does not match dimensions");
    let bw = DctBasis::new(width);
    let bh = DctBasis::new(height);
    // rows first, then columns
    let mut tmp = vec![0.0; width * height];
    for y in 0..height {
        let row = &block[y * width..(y + 1) * width];
        for v in 0..width {
            tmp[y * width + v] = row.iter().enumerate().map(|(x, s)| bw.at(v, x) * s).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for v in 0..width {
        for u in 0..height {
            out[u * width + v] = (0..height).map(|y| bh.at(u, y) * tmp[y * width + v]).sum();
        }
    }
    out
}

/// Inverse of [`dct2_rect`].
pub fn idct2_rect(coeffs: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(coeffs.len(), width * height, "coefficient size does not match dimensions");
    let bw = DctBasis::new(width);
    let bh = DctBasis::new(height);
    let mut tmp = vec![0.0; width * height];
    for u in 0..height {
        let row = &coeffs[u * width..(u + 1) * width];
        for x in 0..width {
            tmp[u * width + x] = row.iter().enumerate().map(|(v, c)| bw.at(v, x) * c).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for x in 0..width {
        for y in 0..height {
            out[y * width + x] = (0..height).map(|u| bh.at(u, y) * tmp[u * width + x]).sum();
        }
    }
    out
}

/// Orthonormal 2D DCT-II coefficients of a square patch, indexed `[u * size + v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctCoefficients {
    size: usize,
    coeffs: Vec<f64>,
}

impl DctCoefficients {
    pub fn from_raw(size: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != size * size {
            return Err(Error::LengthMismatch {
                left: size * size,
                right: coeffs.len(),
            });
        }
        Ok(Self { size, coeffs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.coeffs[u * self.size + v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }
}

pub fn dct2(patch: &[f64], size: usize) -> DctCoefficients {
    DctCoefficients {
        size,
        coeffs: dct2_rect(patch, size, size),
    }
}

/// Assignment of every non-DC coefficient `(u, v)` to one of `bands` diagonal bands.
///
/// Bands split the diagonal index `u + v` over `1..=2(P-1)` into contiguous ranges of
/// (near) equal width. Band ids are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPartition {
    size: usize,
    bands: usize,
    band_of: Vec<Option<usize>>,
}

impl BandPartition {
    pub fn new(size: usize, bands: usize) -> Result<Self> {
        let diagonals = 2 * size.saturating_sub(1);
        if bands == 0 || bands > diagonals {
            return Err(Error::InvalidBandCount {
                bands,
                patch_size: size,
            });
        }
        let band_of = (0..size * size)
            .map(|i| {
                let d = i / size + i % size;
                (d > 0).then(|| (d - 1) * bands / diagonals + 1)
            })
            .collect();
        Ok(Self {
            size,
            bands,
            band_of,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Band id of coefficient `(u, v)`, or `None` for DC.
    pub fn band_of(&self, u: usize, v: usize) -> Option<usize> {
        self.band_of[u * self.size + v]
    }
}

/// AC energy below this fraction of the total patch energy is transform round-off.
const ROUNDOFF_ENERGY_RATIO: f64 = 1e-20;

/// Squared-coefficient energy per band, DC excluded. A numerically flat patch (AC energy at
/// round-off level) yields all zeros.
pub fn band_energies(coeffs: &DctCoefficients, part: &BandPartition) -> Result<Vec<f64>> {
    if coeffs.size != part.size {
        return Err(Error::DimensionMismatch(format!(
            "{}px coefficients with a {}px band partition",
            coeffs.size, part.size
        )));
    }
    let mut energies = vec![0.0; part.bands];
    for (c, band) in coeffs.coeffs.iter().zip(&part.band_of) {
        if let Some(b) = band {
            energies[b - 1] += c * c;
        }
    }
    let total: f64 = coeffs.coeffs.iter().map(|c| c * c).sum();
    if energies.iter().sum::<f64>() <= ROUNDOFF_ENERGY_RATIO * total {
        energies.iter_mut().for_each(|e| *e = 0.0);
    }
    Ok(energies)
}

/// A probability vector over frequency bands.
#[derive(Clone, Debug, PartialEq)]
pub struct BandDistribution(Vec<f64>);

impl BandDistribution {
    pub fn new(q: Vec<f64>) -> Self {
        Self(q)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Image-level reference spectrum: the mean of all patch distributions.
pub type FrequencyProfile = BandDistribution;

/// Normalizes band energies to sum to one; an all-zero vector maps to the uniform distribution.
pub fn band_distribution(energies: &[f64]) -> BandDistribution {
    let total: f64 = energies.iter().sum();
    if total > 0.0 {
        BandDistribution(energies.iter().map(|e| e / total).collect())
    } else {
        let k = energies.len();
        BandDistribution(vec![1.0 / k as f64; k])
    }
}

/// Componentwise mean, summed in the given (row-major) order.
pub fn mean_profile(all: &[BandDistribution]) -> Result<FrequencyProfile> {
    let first = all.first().ok_or(Error::EmptyGrid)?;
    let k = first.len();
    let mut acc = vec![0.0; k];
    for q in all {
        if q.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: q.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&q.0) {
            *a += v;
        }
    }
    let n = all.len() as f64;
    Ok(BandDistribution(acc.into_iter().map(|a| a / n).collect()))
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).log2()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in bits, with `0 log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            kl_term(a, m) + kl_term(b, m)
        })
        .sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

pub fn freq_anomaly(q: &BandDistribution, profile: &FrequencyProfile) -> Result<f64> {
    jsd(&q.0, &profile.0)
}

/// Frequency cue for a whole grid.
#[derive(Clone, Debug)]
pub struct FrequencyAnalysis {
    pub distributions: PatchMap<BandDistribution>,
    pub profile: FrequencyProfile,
    pub scores: PatchMap<f64>,
}

pub fn analyze(grid: &PatchGrid, part: &BandPartition) -> Result<FrequencyAnalysis> {
    let p = grid.patch_size();
    let mut dists = Vec::with_capacity(grid.len());
    for patch in grid.iter() {
        let energies = band_energies(&dct2(&patch.pixels, p), part)?;
        dists.push(band_distribution(&energies));
    }
    let profile = mean_profile(&dists)?;
    let scores = dists
        .iter()
        .map(|q| freq_anomaly(q, &profile))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = grid.dims();
    Ok(FrequencyAnalysis {
        distributions: PatchMap::from_vec(rows, cols, dists)?,
        profile,
        scores: PatchMap::from_vec(rows, cols, scores)?,
    })
}
