//! Patch embeddings, spherical k-means clustering and CLS-anchored semantic discrepancy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer};

use crate::error::{Error, Result};
use crate::grid::{PatchGrid, PatchMap};
use crate::spectral::{self, BandDistribution, BandPartition};

pub const DEFAULT_CLUSTERS: usize = 4;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Ingested,
    Intrinsic,
}

/// CLS anchor plus one embedding per grid patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub cls: Vec<f64>,
    pub patches: PatchMap<Vec<f64>>,
    pub source: EmbeddingSource,
    /// Number of zero-norm patch vectors replaced by the first unit vector.
    pub repaired: usize,
}

impl EmbeddingSet {
    /// Validates raw vectors and applies the zero-vector repair rule.
    pub fn new(
        cls: Vec<f64>,
        patches: PatchMap<Vec<f64>>,
        source: EmbeddingSource,
    ) -> Result<Self> {
        let dim = cls.len();
        if dim == 0 {
            return Err(Error::Schema("embedding dimension must be positive".into()));
        }
        check_finite(&cls, "cls")?;
        if norm(&cls) == 0.0 {
            return Err(Error::ZeroVector);
        }
        let mut repaired = 0;
        let mut patches = patches;
        for i in 0..patches.len() {
            let coord = patches.coord_of(i);
            let v = patches.get_mut(coord);
            if v.len() != dim {
                return Err(Error::Schema(format!(
                    "patch ({}, {}) has {} components, expected {dim}",
                    coord.r,
                    coord.c,
                    v.len()
                )));
            }
            check_finite(v, &format!("patches[{i}]"))?;
            if norm(v) == 0.0 {
                v.iter_mut().for_each(|x| *x = 0.0);
                v[0] = 1.0;
                repaired += 1;
            }
        }
        Ok(Self {
            dim,
            cls,
            patches,
            source,
            repaired,
        })
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.patches.dims()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::NonFiniteValue(format!("{what}[{j}]"))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

// --- embedding file ---------------------------------------------------------

/// A float that also accepts the `NaN` / `Infinity` tokens Python's `json` module emits.
struct LenientFloat(f64);

impl<'de> Deserialize<'de> for LenientFloat {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Token(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(LenientFloat(v)),
            Raw::Token(t) => match t.as_str() {
                "NaN" => Ok(LenientFloat(f64::NAN)),
                "Infinity" => Ok(LenientFloat(f64::INFINITY)),
                "-Infinity" => Ok(LenientFloat(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    dim: usize,
    grid: [usize; 2],
    cls: Vec<LenientFloat>,
    patches: Vec<Vec<LenientFloat>>,
}

/// Quotes bare `NaN`, `Infinity` and `-Infinity` tokens outside of string literals.
fn quote_special_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '"' {
            in_string = true;
        }
        if let Some(tok) = ["-Infinity", "Infinity", "NaN"].iter().find(|t| rest.starts_with(**t)) {
            out.push('"');
            out.push_str(tok);
            out.push('"');
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn parse_embeddings(text: &str, expected: (usize, usize)) -> Result<EmbeddingSet> {
    let file: EmbeddingFile = serde_json::from_str(&quote_special_tokens(text))
        .map_err(|e| Error::Schema(e.to_string()))?;
    let [rows, cols] = file.grid;
    if file.cls.len() != file.dim {
        return Err(Error::Schema(format!(
            "cls has {} components, dim is {}",
            file.cls.len(),
            file.dim
        )));
    }
    if file.patches.len() != rows * cols {
        return Err(Error::Schema(format!(
            "grid {rows}x{cols} needs {} patch rows, found {}",
            rows * cols,
            file.patches.len()
        )));
    }
    if let Some(i) = file.patches.iter().position(|p| p.len() != file.dim) {
        return Err(Error::Schema(format!(
            "patches[{i}] has {} components, dim is {}",
            file.patches[i].len(),
            file.dim
        )));
    }
    if (rows, cols) != expected {
        return Err(Error::GridMismatch {
            expected,
            found: (rows, cols),
        });
    }
    let cls = file.cls.into_iter().map(|f| f.0).collect();
    let patches = file
        .patches
        .into_iter()
        .map(|p| p.into_iter().map(|f| f.0).collect())
        .collect();
    EmbeddingSet::new(cls, PatchMap::from_vec(rows, cols, patches)?, EmbeddingSource::Ingested)
}

/// Loads an external encoder's output and checks it against the image grid.
pub fn ingest_embeddings(path: &Path, expected: (usize, usize)) -> Result<EmbeddingSet> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    parse_embeddings(&std::fs::read_to_string(path)?, expected)
}

// --- intrinsic descriptors --------------------------------------------------

/// Offline stand-in for an encoder: band distribution, mean and standard deviation of luma.
pub fn intrinsic_embed(grid: &PatchGrid, bands: usize) -> Result<EmbeddingSet> {
    let part = BandPartition::new(grid.patch_size(), bands)?;
    let analysis = spectral::analyze(grid, &part)?;
    intrinsic_from_distributions(grid, &analysis.distributions)
}

pub fn intrinsic_from_distributions(
    grid: &PatchGrid,
    distributions: &PatchMap<BandDistribution>,
) -> Result<EmbeddingSet> {
    if distributions.dims() != grid.dims() {
        return Err(Error::DimensionMismatch("band distributions do not match grid".into()));
    }
    let descriptors: Vec<Vec<f64>> = grid
        .iter()
        .zip(distributions.as_slice())
        .map(|(patch, q)| {
            let n = patch.pixels.len() as f64;
            let mean = patch.pixels.iter().sum::<f64>() / n;
            let var = patch.pixels.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let mut d = q.as_slice().to_vec();
            d.push(mean);
            d.push(var.sqrt());
            normalized(&d)
        })
        .collect();
    let dim = descriptors[0].len();
    let mut mean = vec![0.0; dim];
    for d in &descriptors {
        for (m, x) in mean.iter_mut().zip(d) {
            *m += x;
        }
    }
    let count = descriptors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let cls = normalized(&mean);
    EmbeddingSet::new(
        cls,
        PatchMap::from_vec(grid.rows(), grid.cols(), descriptors)?,
        EmbeddingSource::Intrinsic,
    )
}

// --- spherical k-means ------------------------------------------------------

/// Result of clustering a flat list of vectors. Cluster ids are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of member-to-centroid cosines after each iteration.
    pub objective: Vec<f64>,
}

/// Spherical k-means over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: PatchMap<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn cluster_of(&self, coord: crate::grid::PatchCoord) -> usize {
        *self.assignment.get(coord)
    }
}

fn argmax_cosine(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, mu) in centroids.iter().enumerate() {
        let sim = dot(x, mu);
        if sim > best_sim {
            best = j;
            best_sim = sim;
        }
    }
    best
}

/// Cosine analogue of k-means++ seeding: later picks favour points far from chosen centroids.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|x| {
                let best = chosen
                    .iter()
                    .map(|&c| dot(x, &points[c]))
                    .fold(f64::NEG_INFINITY, f64::max);
                (1.0 - best).max(0.0)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the worst-fitting point of a multi-member cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut worst: Option<(usize, f64)> = None;
        for (i, x) in points.iter().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let sim = dot(x, &centroids[assignment[i]]);
            if worst.is_none_or(|(_, s)| sim < s) {
                worst = Some((i, sim));
            }
        }
        let (i, _) = worst.expect("k <= n guarantees a multi-member cluster");
        centroids[empty] = points[i].clone();
        assignment[i] = empty;
    }
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(x, &a)| dot(x, &centroids[a]))
        .sum()
}

/// Clusters vectors by cosine similarity. Inputs are normalized internally and must be nonzero.
pub fn cluster_vectors(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { clusters: k, points: n });
    }
    if points.iter().any(|p| norm(p) == 0.0) {
        return Err(Error::ZeroVector);
    }
    let unit: Vec<Vec<f64>> = points.iter().map(|p| normalized(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&unit, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = unit.iter().map(|x| argmax_cosine(x, &centroids)).collect();
        repair_empty(&unit, &mut centroids, &mut next);

        let dim = unit[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        for (x, &a) in unit.iter().zip(&next) {
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for (mu, s) in centroids.iter_mut().zip(&sums) {
            let len = norm(s);
            // members that cancel exactly keep the previous direction
            if len > 0.0 {
                *mu = s.iter().map(|v| v / len).collect();
            }
        }
        history.push(objective(&unit, &centroids, &next));

        let unchanged = next == assignment;
        assignment = next;
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(Clustering {
        centroids,
        assignment: assignment.into_iter().map(|a| a + 1).collect(),
        iterations,
        converged,
        objective: history,
    })
}

pub fn spherical_kmeans(emb: &EmbeddingSet, k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    let result = cluster_vectors(emb.patches.as_slice(), k, seed, max_iter)?;
    let (rows, cols) = emb.grid_dims();
    Ok(ClusterModel {
        k,
        centroids: result.centroids,
        assignment: PatchMap::from_vec(rows, cols, result.assignment)?,
        iterations: result.iterations,
        converged: result.converged,
        objective: result.objective,
        seed,
    })
}

/// `1 - cos(t, cls)`, in `[0, 2]`.
pub fn semantic_discrepancy(t: &[f64], cls: &[f64]) -> Result<f64> {
    if t.len() != cls.len() {
        return Err(Error::LengthMismatch {
            left: t.len(),
            right: cls.len(),
        });
    }
    let (nt, nc) = (norm(t), norm(cls));
    if nt == 0.0 || nc == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - dot(t, cls) / (nt * nc)).clamp(0.0, 2.0))
}

pub fn semantic_scores(emb: &EmbeddingSet) -> Result<PatchMap<f64>> {
    let scores = emb
        .patches
        .as_slice()
        .iter()
        .map(|t| semantic_discrepancy(t, &emb.cls))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = emb.grid_dims();
    PatchMap::from_vec(rows, cols, scores)
}
