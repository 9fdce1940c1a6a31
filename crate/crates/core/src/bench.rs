//! Synthetic local manipulations with known patch masks, and localization scoring of the
//! mined evidence against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::PackParams;
use crate::grid::{patch_box, ImageBuffer, PatchCoord, PatchMap, PixelBox};
use crate::pipeline::{self, Embeddings, MineParams};
use crate::residual::gaussian_blur_rect;
use crate::spectral::{dct2_rect, idct2_rect};

/// Texture amplitude of the synthetic base, in 8-bit levels.
const BASE_TEXTURE_STD: f64 = 18.0;
const BASE_TEXTURE_SIGMA: f64 = 1.0;

/// Deterministic band-limited noise over a smooth gradient.
pub fn synthesize_base(width: u32, height: u32, seed: u64) -> ImageBuffer {
    let (w, h) = (width as usize, height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..w * h).map(|_| normal.sample(&mut rng)).collect();
    let texture = gaussian_blur_rect(&white, w, h, BASE_TEXTURE_SIGMA).expect("positive sigma");
    let spread = (texture.iter().map(|v| v * v).sum::<f64>() / texture.len() as f64).sqrt();
    let gain = if spread > 0.0 { BASE_TEXTURE_STD / spread } else { 0.0 };

    let tilt_x = rng.random_range(30.0..70.0);
    let tilt_y = rng.random_range(10.0..40.0);
    let mut img = ImageBuffer::filled(width, height, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let base = 90.0 + tilt_x * x as f64 / w as f64 + tilt_y * y as f64 / h as f64;
            let v = base + gain * texture[y * w + x];
            let px = [v + 4.0, v, v - 8.0].map(|c| c.round().clamp(0.0, 255.0) as u8);
            img.set_pixel(x as u32, y as u32, px);
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manipulation {
    /// Additive Gaussian noise with std `strength` (in `[0, 1]` intensity units).
    SpliceNoise,
    /// Gaussian blur with sigma `strength` pixels.
    SpliceBlur,
    /// High-band DCT coefficients of the region scaled by `strength`.
    SpectralBoost,
    /// Region replaced by the same-sized block whose top-left corner is `(source_x, source_y)`.
    CopyMove { source_x: u32, source_y: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub kind: Manipulation,
    pub region: PixelBox,
    pub strength: f64,
    pub seed: u64,
}

/// Patches whose pixel box intersects `region`.
pub fn region_mask(width: u32, height: u32, patch_size: u32, region: PixelBox) -> PatchMap<bool> {
    let rows = (height / patch_size) as usize;
    let cols = (width / patch_size) as usize;
    PatchMap::from_fn(rows, cols, |coord| patch_box(coord, patch_size).intersects(&region))
}

fn channel(img: &ImageBuffer, region: PixelBox, ch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(region.w as usize * region.h as usize);
    for y in region.y..region.bottom() {
        for x in region.x..region.right() {
            out.push(img.pixel(x, y)[ch] as f64);
        }
    }
    out
}

fn write_channel(img: &mut ImageBuffer, region: PixelBox, ch: usize, values: &[f64]) {
    let w = region.w as usize;
    for (i, v) in values.iter().enumerate() {
        let x = region.x + (i % w) as u32;
        let y = region.y + (i / w) as u32;
        let mut px = img.pixel(x, y);
        px[ch] = v.round().clamp(0.0, 255.0) as u8;
        img.set_pixel(x, y, px);
    }
}

/// Applies one local edit and returns the edited image with its patch-level ground truth.
pub fn apply_manipulation(
    img: &ImageBuffer,
    spec: &ManipulationSpec,
    patch_size: u32,
) -> Result<(ImageBuffer, PatchMap<bool>)> {
    let region = spec.region;
    if region.is_empty() || !img.bounds().contains_box(&region) {
        return Err(Error::RegionOutOfBounds(region));
    }
    if !(spec.strength > 0.0) || !spec.strength.is_finite() {
        return Err(Error::InvalidManipulation(format!(
            "strength must be positive, got {}",
            spec.strength
        )));
    }
    let mut out = img.clone();
    let (w, h) = (region.w as usize, region.h as usize);
    match spec.kind {
        Manipulation::SpliceNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0, spec.strength * 255.0)
                .map_err(|e| Error::InvalidManipulation(e.to_string()))?;
            for y in region.y..region.bottom() {
                for x in region.x..region.right() {
                    let px = img.pixel(x, y);
                    let noisy = px.map(|c| (c as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
                    out.set_pixel(x, y, noisy);
                }
            }
        }
        Manipulation::SpliceBlur => {
            for ch in 0..3 {
                let blurred = gaussian_blur_rect(&channel(img, region, ch), w, h, spec.strength)?;
                write_channel(&mut out, region, ch, &blurred);
            }
        }
        Manipulation::SpectralBoost => {
            for ch in 0..3 {
                let mut coeffs = dct2_rect(&channel(img, region, ch), w, h);
                for u in 0..h {
                    for v in 0..w {
                        if u as f64 / h as f64 + v as f64 / w as f64 > 0.5 {
                            coeffs[u * w + v] *= spec.strength;
                        }
                    }
                }
                write_channel(&mut out, region, ch, &idct2_rect(&coeffs, w, h));
            }
        }
        Manipulation::CopyMove { source_x, source_y } => {
            let source = PixelBox::new(source_x, source_y, region.w, region.h);
            if !img.bounds().contains_box(&source) {
                return Err(Error::RegionOutOfBounds(source));
            }
            for dy in 0..region.h {
                for dx in 0..region.w {
                    out.set_pixel(region.x + dx, region.y + dy, img.pixel(source.x + dx, source.y + dy));
                }
            }
        }
    }
    Ok((out, region_mask(img.width(), img.height(), patch_size, region)))
}

/// Manipulation family used by the localization bench; copy-move sources are drawn per seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    SpliceNoise,
    SpliceBlur,
    SpectralBoost,
    CopyMove,
}

impl std::str::FromStr for ManipulationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "splice_noise" => Ok(Self::SpliceNoise),
            "splice_blur" => Ok(Self::SpliceBlur),
            "spectral_boost" => Ok(Self::SpectralBoost),
            "copy_move" => Ok(Self::CopyMove),
            other => Err(format!("unknown manipulation kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTemplate {
    pub kind: ManipulationKind,
    pub strength: f64,
    pub width: u32,
    pub height: u32,
    /// Region size in patches (rows, cols); regions are patch-aligned.
    pub region_patches: (usize, usize),
    /// Number of leading pack entries scored by `hit_at_k`.
    pub hit_k: usize,
}

impl Default for BenchTemplate {
    fn default() -> Self {
        Self {
            kind: ManipulationKind::SpliceNoise,
            strength: 0.2,
            width: 224,
            height: 224,
            region_patches: (2, 2),
            hit_k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub region: [u32; 4],
    pub pack_size: usize,
    pub hit_at_k: f64,
    /// Fraction of all pack entries that fall on the mask.
    pub pack_hit_rate: f64,
    pub mask_recall: f64,
    pub masked_mean_score: f64,
    pub unmasked_mean_score: f64,
    /// Fraction of masked patches whose noise score is above the residual median.
    pub masked_noise_above_median: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub template: BenchTemplate,
    pub params: PackParams,
    pub n_seeds: usize,
    /// Expected `hit_at_k` of a uniformly random patch choice.
    pub chance_rate: f64,
    pub hit_at_k: Summary,
    pub pack_hit_rate: Summary,
    pub mask_recall: Summary,
    pub rows: Vec<SeedRecord>,
}

/// Builds the manipulation for seed `seed`: a random patch-aligned region and, for copy-move,
/// a random non-overlapping source block.
pub fn seeded_spec(template: &BenchTemplate, patch_size: u32, seed: u64) -> Result<ManipulationSpec> {
    let rows = (template.height / patch_size) as usize;
    let cols = (template.width / patch_size) as usize;
    let (rh, rw) = template.region_patches;
    if rh == 0 || rw == 0 || rh > rows || rw > cols {
        return Err(Error::InvalidManipulation(format!(
            "{rh}x{rw} patch region does not fit a {rows}x{cols} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f4e_610a);
    let r0 = rng.random_range(0..=rows - rh) as u32;
    let c0 = rng.random_range(0..=cols - rw) as u32;
    let region = PixelBox::new(c0 * patch_size, r0 * patch_size, rw as u32 * patch_size, rh as u32 * patch_size);
    let kind = match template.kind {
        ManipulationKind::SpliceNoise => Manipulation::SpliceNoise,
        ManipulationKind::SpliceBlur => Manipulation::SpliceBlur,
        ManipulationKind::SpectralBoost => Manipulation::SpectralBoost,
        ManipulationKind::CopyMove => {
            let max_x = template.width - region.w;
            let max_y = template.height - region.h;
            let source = loop {
                let candidate = PixelBox::new(rng.random_range(0..=max_x), rng.random_range(0..=max_y), region.w, region.h);
                if !candidate.intersects(&region) || (max_x == 0 && max_y == 0) {
                    break candidate;
                }
            };
            Manipulation::CopyMove {
                source_x: source.x,
                source_y: source.y,
            }
        }
    };
    Ok(ManipulationSpec {
        kind,
        region,
        strength: template.strength,
        seed,
    })
}

/// Base image, manipulated image and mask for one seed. A zero-strength template is the
/// no-edit control: the image is left untouched but the region mask is still drawn.
pub fn seeded_case(template: &BenchTemplate, patch_size: u32, seed: u64) -> Result<(ImageBuffer, ImageBuffer, ManipulationSpec, PatchMap<bool>)> {
    let base = synthesize_base(template.width, template.height, seed);
    let spec = seeded_spec(template, patch_size, seed)?;
    if spec.strength == 0.0 {
        let mask = region_mask(template.width, template.height, patch_size, spec.region);
        return Ok((base.clone(), base, spec, mask));
    }
    let (img, mask) = apply_manipulation(&base, &spec, patch_size)?;
    Ok((base, img, spec, mask))
}

/// Runs the full mining pipeline on one manipulated synthetic image.
pub fn evaluate_seed(template: &BenchTemplate, params: &MineParams, seed: u64) -> Result<SeedRecord> {
    let p = params.patch_size as u32;
    let (_, img, spec, mask) = seeded_case(template, p, seed)?;
    let out = pipeline::mine(&img, &format!("synthetic-{seed}"), params, Embeddings::Intrinsic)?;

    let k = template.hit_k.max(1).min(out.pack.len());
    let hits = out.pack.entries[..k]
        .iter()
        .filter(|e| *mask.get(e.candidate.coord))
        .count();
    let pack_hits = out
        .pack
        .entries
        .iter()
        .filter(|e| *mask.get(e.candidate.coord))
        .count();
    let masked: Vec<PatchCoord> = mask.iter().filter(|(_, m)| **m).map(|(c, _)| c).collect();
    let selected = masked
        .iter()
        .filter(|c| out.pack.entries.iter().any(|e| e.candidate.coord == **c))
        .count();

    let mut masked_scores = Vec::new();
    let mut unmasked_scores = Vec::new();
    for (coord, s) in out.scores.fused.iter() {
        if *mask.get(coord) {
            masked_scores.push(*s);
        } else {
            unmasked_scores.push(*s);
        }
    }
    let above = masked
        .iter()
        .filter(|c| *out.residual.energies.get(**c) > out.noise.median)
        .count();
    let r = spec.region;
    Ok(SeedRecord {
        seed,
        region: [r.x, r.y, r.w, r.h],
        pack_size: out.pack.len(),
        hit_at_k: hits as f64 / k as f64,
        pack_hit_rate: pack_hits as f64 / out.pack.len() as f64,
        mask_recall: selected as f64 / masked.len().max(1) as f64,
        masked_mean_score: Summary::of(&masked_scores).mean,
        unmasked_mean_score: Summary::of(&unmasked_scores).mean,
        masked_noise_above_median: above as f64 / masked.len().max(1) as f64,
    })
}

/// Localization over seeds `0..n_seeds`, aggregated in seed order.
pub fn evaluate_localization(
    n_seeds: usize,
    template: &BenchTemplate,
    params: &MineParams,
) -> Result<LocalizationReport> {
    if n_seeds == 0 {
        return Err(Error::InvalidManipulation("n_seeds must be >= 1".into()));
    }
    params.validate()?;
    if !(template.strength >= 0.0) || !template.strength.is_finite() {
        return Err(Error::InvalidManipulation(format!(
            "strength must be non-negative, got {}",
            template.strength
        )));
    }
    let rows = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| evaluate_seed(template, params, seed))
        .collect::<Result<Vec<_>>>()?;
    let p = params.patch_size as u32;
    let grid_area = (template.width / p) as f64 * (template.height / p) as f64;
    let mask_area = (template.region_patches.0 * template.region_patches.1) as f64;
    Ok(LocalizationReport {
        template: template.clone(),
        params: params.pack_params(),
        n_seeds,
        chance_rate: mask_area / grid_area,
        hit_at_k: Summary::of(&rows.iter().map(|r| r.hit_at_k).collect::<Vec<_>>()),
        pack_hit_rate: Summary::of(&rows.iter().map(|r| r.pack_hit_rate).collect::<Vec<_>>()),
        mask_recall: Summary::of(&rows.iter().map(|r| r.mask_recall).collect::<Vec<_>>()),
        rows,
    })
}

/// Mean rank percentile (0 = lowest, 1 = highest) of the masked patches under `scores`.
pub fn masked_rank(scores: &PatchMap<f64>, mask: &PatchMap<bool>) -> f64 {
    let values = scores.as_slice();
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos as f64 / (n - 1) as f64;
    }
    let picked: Vec<f64> = mask
        .as_slice()
        .iter()
        .zip(&rank)
        .filter(|(m, _)| **m)
        .map(|(_, r)| *r)
        .collect();
    Summary::of(&picked).mean
}
