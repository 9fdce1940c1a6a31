//! End-to-end evidence mining: grid, cues, clustering, fusion and selection.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{ParamError, Result};
use crate::evidence::{self, EvidencePack, FusedScores, PackParams};
use crate::grid::{self, ImageBuffer};
use crate::residual::{self, NoiseScores, ResidualField};
use crate::semantics::{self, ClusterModel, EmbeddingSet, EmbeddingSource};
use crate::spectral::{self, BandPartition, FrequencyAnalysis};

#[derive(Clone, Debug, PartialEq)]
pub struct MineParams {
    pub alpha: f64,
    pub k_clusters: usize,
    pub k_bands: usize,
    pub k1: usize,
    pub tau: f64,
    pub patch_size: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub margin: u32,
}

impl Default for MineParams {
    fn default() -> Self {
        Self {
            alpha: evidence::DEFAULT_ALPHA,
            k_clusters: semantics::DEFAULT_CLUSTERS,
            k_bands: spectral::DEFAULT_BANDS,
            k1: evidence::DEFAULT_K1,
            tau: evidence::DEFAULT_TAU,
            patch_size: grid::DEFAULT_PATCH_SIZE as usize,
            sigma: residual::DEFAULT_SIGMA,
            epsilon: residual::DEFAULT_EPSILON,
            seed: 42,
            max_iter: semantics::DEFAULT_MAX_ITER,
            margin: grid::DEFAULT_CROP_MARGIN,
        }
    }
}

impl MineParams {
    pub fn validate(&self) -> std::result::Result<(), ParamError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(ParamError::Alpha(self.alpha));
        }
        if self.k_clusters < 1 {
            return Err(ParamError::Clusters(self.k_clusters));
        }
        if self.k1 < 1 {
            return Err(ParamError::K1(self.k1));
        }
        if !(self.tau >= 0.0) {
            return Err(ParamError::Tau(self.tau));
        }
        if self.patch_size < 4 {
            return Err(ParamError::PatchSize(self.patch_size));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(ParamError::Sigma(self.sigma));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ParamError::Epsilon(self.epsilon));
        }
        if self.k_bands < 1 || self.k_bands > 2 * (self.patch_size - 1) {
            return Err(ParamError::Bands(self.k_bands));
        }
        if self.max_iter < 1 {
            return Err(ParamError::MaxIter);
        }
        Ok(())
    }

    pub fn pack_params(&self) -> PackParams {
        PackParams {
            alpha: self.alpha,
            k_clusters: self.k_clusters,
            k1: self.k1,
            tau: self.tau,
            k_bands: self.k_bands,
            patch_size: self.patch_size,
            sigma: self.sigma,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

/// Where patch embeddings come from.
#[derive(Clone, Copy, Debug)]
pub enum Embeddings<'a> {
    Intrinsic,
    File(&'a Path),
    Provided(&'a EmbeddingSet),
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub grid: f64,
    pub spectral: f64,
    pub residual: f64,
    pub semantics: f64,
    pub evidence: f64,
}

/// Evidence tokens sent versus the whole-image patch count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenBudget {
    pub pack_size: usize,
    pub total_patches: usize,
    pub max_pack_size: usize,
    pub token_reduction: f64,
}

impl TokenBudget {
    pub fn new(pack_size: usize, total_patches: usize, params: &MineParams) -> Self {
        Self {
            pack_size,
            total_patches,
            max_pack_size: params.k_clusters * params.k1,
            token_reduction: 1.0 - pack_size as f64 / total_patches as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MineOutput {
    pub grid_dims: (usize, usize),
    pub frequency: FrequencyAnalysis,
    pub residual: ResidualField,
    pub noise: NoiseScores,
    pub embedding_source: EmbeddingSource,
    pub repaired_embeddings: usize,
    pub clusters: ClusterModel,
    pub scores: FusedScores,
    pub pack: EvidencePack,
    pub budget: TokenBudget,
    pub timings: StageTimings,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed().as_secs_f64();
    out
}

/// Scores every patch and selects the evidence pack for one image.
pub fn mine(
    img: &ImageBuffer,
    image_id: &str,
    params: &MineParams,
    embeddings: Embeddings<'_>,
) -> Result<MineOutput> {
    params.validate()?;
    let mut timings = StageTimings::default();

    let patches = timed(&mut timings.grid, || {
        grid::decompose(&grid::to_luma(img), params.patch_size)
    })?;
    let frequency = timed(&mut timings.spectral, || {
        let part = BandPartition::new(params.patch_size, params.k_bands)?;
        spectral::analyze(&patches, &part)
    })?;
    let (residual, noise) = timed(&mut timings.residual, || {
        let field = residual::residual_field(&patches, params.sigma)?;
        let noise = residual::noise_anomaly(&field, params.epsilon)?;
        Ok((field, noise))
    })?;
    let (emb, clusters, sem) = timed(&mut timings.semantics, || {
        let emb = match embeddings {
            Embeddings::Intrinsic => {
                semantics::intrinsic_from_distributions(&patches, &frequency.distributions)?
            }
            Embeddings::File(path) => semantics::ingest_embeddings(path, patches.dims())?,
            Embeddings::Provided(set) => {
                if set.grid_dims() != patches.dims() {
                    return Err(crate::Error::GridMismatch {
                        expected: patches.dims(),
                        found: set.grid_dims(),
                    });
                }
                set.clone()
            }
        };
        let clusters = semantics::spherical_kmeans(&emb, params.k_clusters, params.seed, params.max_iter)?;
        let sem = semantics::semantic_scores(&emb)?;
        Ok((emb, clusters, sem))
    })?;
    let (scores, pack) = timed(&mut timings.evidence, || {
        let scores = evidence::fuse(&sem, &frequency.scores, &noise.scores, params.alpha)?;
        let selected: Vec<_> = evidence::topk_per_cluster(&scores, &clusters, params.k1)
            .iter()
            .map(|cands| evidence::grid_nms(cands, params.tau))
            .collect();
        let pack = evidence::assemble_pack(
            &selected,
            &patches,
            img,
            params.pack_params(),
            image_id,
            params.margin,
        )?;
        Ok((scores, pack))
    })?;

    let budget = TokenBudget::new(pack.len(), patches.len(), params);
    Ok(MineOutput {
        grid_dims: patches.dims(),
        frequency,
        residual,
        noise,
        embedding_source: emb.source,
        repaired_embeddings: emb.repaired,
        clusters,
        scores,
        pack,
        budget,
        timings,
    })
}
