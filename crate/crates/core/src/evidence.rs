//! Score fusion, per-cluster selection, grid NMS and the serialized evidence pack.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop_with_margin, ImageBuffer, PatchCoord, PatchGrid, PatchMap, PixelBox};
use crate::semantics::ClusterModel;

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_K1: usize = 4;
pub const DEFAULT_TAU: f64 = 2.0;
pub const MANIFEST_NAME: &str = "pack.json";

/// `S = A_sem + alpha * (A_freq + A_noise)` with the components it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedScores {
    pub fused: PatchMap<f64>,
    pub sem: PatchMap<f64>,
    pub freq: PatchMap<f64>,
    pub noise: PatchMap<f64>,
    pub alpha: f64,
}

impl FusedScores {
    pub fn candidate(&self, coord: PatchCoord, cluster: usize) -> Candidate {
        Candidate {
            coord,
            score: *self.fused.get(coord),
            cluster,
            sem: *self.sem.get(coord),
            freq: *self.freq.get(coord),
            noise: *self.noise.get(coord),
        }
    }
}

pub fn fuse(
    sem: &PatchMap<f64>,
    freq: &PatchMap<f64>,
    noise: &PatchMap<f64>,
    alpha: f64,
) -> Result<FusedScores> {
    if !(alpha >= 0.0) {
        return Err(Error::NegativeAlpha(alpha));
    }
    if sem.dims() != freq.dims() || sem.dims() != noise.dims() {
        return Err(Error::DimensionMismatch(format!(
            "score grids {:?}, {:?}, {:?}",
            sem.dims(),
            freq.dims(),
            noise.dims()
        )));
    }
    let values = sem
        .as_slice()
        .iter()
        .zip(freq.as_slice())
        .zip(noise.as_slice())
        .map(|((s, f), n)| s + alpha * (f + n))
        .collect();
    Ok(FusedScores {
        fused: PatchMap::from_vec(sem.rows(), sem.cols(), values)?,
        sem: sem.clone(),
        freq: freq.clone(),
        noise: noise.clone(),
        alpha,
    })
}

/// A patch nominated as evidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub coord: PatchCoord,
    pub score: f64,
    pub cluster: usize,
    pub sem: f64,
    pub freq: f64,
    pub noise: f64,
}

/// Descending score, ties in row-major order.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.coord.cmp(&b.coord))
}

/// The `k1` best patches of every cluster; entry `j` holds cluster `j + 1`.
pub fn topk_per_cluster(scores: &FusedScores, model: &ClusterModel, k1: usize) -> Vec<Vec<Candidate>> {
    let mut members: Vec<Vec<Candidate>> = vec![Vec::new(); model.k];
    for (coord, &cluster) in model.assignment.iter() {
        members[cluster - 1].push(scores.candidate(coord, cluster));
    }
    for list in &mut members {
        list.sort_by(rank_order);
        list.truncate(k1);
    }
    members
}

/// Greedy suppression: a candidate survives if it is at least `tau` grid units from
/// every higher-ranked survivor.
pub fn grid_nms(candidates: &[Candidate], tau: f64) -> Vec<Candidate> {
    let mut ordered = candidates.to_vec();
    ordered.sort_by(rank_order);
    let mut kept: Vec<Candidate> = Vec::with_capacity(ordered.len());
    for cand in ordered {
        if kept.iter().all(|k| k.coord.distance(&cand.coord) >= tau) {
            kept.push(cand);
        }
    }
    kept
}

/// Parameters that produced a pack, written into its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackParams {
    pub alpha: f64,
    pub k_clusters: usize,
    pub k1: usize,
    pub tau: f64,
    pub k_bands: usize,
    pub patch_size: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceEntry {
    pub candidate: Candidate,
    pub pixel_box: PixelBox,
    pub crop: ImageBuffer,
}

impl EvidenceEntry {
    pub fn crop_name(index: usize) -> String {
        format!("ev_{index}.png")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvidencePack {
    pub image_id: String,
    pub params: PackParams,
    pub entries: Vec<EvidenceEntry>,
}

impl EvidencePack {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_score(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|e| e.candidate.score).sum::<f64>() / self.entries.len() as f64)
    }
}

/// Flattens the per-cluster survivors into pack order and cuts the crops.
///
/// Clusters are ordered by their best score, entries by score, ties row-major.
pub fn assemble_pack(
    selected: &[Vec<Candidate>],
    grid: &PatchGrid,
    img: &ImageBuffer,
    params: PackParams,
    image_id: &str,
    margin: u32,
) -> Result<EvidencePack> {
    let mut keyed: Vec<(f64, Candidate)> = Vec::new();
    for list in selected {
        let Some(best) = list.iter().map(|c| c.score).max_by(f64::total_cmp) else {
            continue;
        };
        keyed.extend(list.iter().map(|c| (best, *c)));
    }
    if keyed.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| rank_order(&a.1, &b.1)));
    let entries = keyed
        .into_iter()
        .map(|(_, candidate)| {
            let pixel_box = grid.box_of(candidate.coord);
            Ok(EvidenceEntry {
                candidate,
                pixel_box,
                crop: crop_with_margin(img, pixel_box, margin)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvidencePack {
        image_id: image_id.to_string(),
        params,
        entries,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    r: usize,
    c: usize,
    cluster: usize,
    score: f64,
    sem: f64,
    freq: f64,
    noise: f64,
    #[serde(rename = "box")]
    bbox: [u32; 4],
    crop: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_id: String,
    params: PackParams,
    entries: Vec<ManifestEntry>,
}

/// Writes `pack.json` and one `ev_<idx>.png` per entry; returns the manifest path.
pub fn serialize_pack(pack: &EvidencePack, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(pack.entries.len());
    for (i, e) in pack.entries.iter().enumerate() {
        let name = EvidenceEntry::crop_name(i);
        e.crop.save_png(&out_dir.join(&name))?;
        let b = e.pixel_box;
        entries.push(ManifestEntry {
            r: e.candidate.coord.r,
            c: e.candidate.coord.c,
            cluster: e.candidate.cluster,
            score: e.candidate.score,
            sem: e.candidate.sem,
            freq: e.candidate.freq,
            noise: e.candidate.noise,
            bbox: [b.x, b.y, b.w, b.h],
            crop: name,
        });
    }
    let manifest = Manifest {
        image_id: pack.image_id.clone(),
        params: pack.params.clone(),
        entries,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Reads a pack written by [`serialize_pack`].
pub fn load_pack(dir: &Path) -> Result<EvidencePack> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::FileNotFound(path));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let entries = manifest
        .entries
        .into_iter()
        .map(|e| {
            let crop = ImageBuffer::from_encoded(&std::fs::read(dir.join(&e.crop))?)?;
            let [x, y, w, h] = e.bbox;
            Ok(EvidenceEntry {
                candidate: Candidate {
                    coord: PatchCoord::new(e.r, e.c),
                    score: e.score,
                    cluster: e.cluster,
                    sem: e.sem,
                    freq: e.freq,
                    noise: e.noise,
                },
                pixel_box: PixelBox::new(x, y, w, h),
                crop,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvidencePack {
        image_id: manifest.image_id,
        params: manifest.params,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(r: usize, c: usize, score: f64) -> Candidate {
        Candidate {
            coord: PatchCoord::new(r, c),
            score,
            cluster: 1,
            sem: score,
            freq: 0.0,
            noise: 0.0,
        }
    }

    fn map(rows: usize, cols: usize, v: &[f64]) -> PatchMap<f64> {
        PatchMap::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn model(assign: &[usize], k: usize, cols: usize) -> ClusterModel {
        ClusterModel {
            k,
            centroids: vec![vec![1.0]; k],
            assignment: PatchMap::from_vec(assign.len() / cols, cols, assign.to_vec()).unwrap(),
            iterations: 1,
            converged: true,
            objective: vec![0.0],
            seed: 0,
        }
    }

    #[test]
    fn fuse_examples() {
        let s = fuse(&map(1, 1, &[0.5]), &map(1, 1, &[0.2]), &map(1, 1, &[1.0]), 0.7).unwrap();
        assert!((s.fused.as_slice()[0] - 1.34).abs() < 1e-12);

        let sem = map(1, 3, &[0.1, 0.4, 0.2]);
        let s = fuse(&sem, &map(1, 3, &[0.9, 0.1, 0.3]), &map(1, 3, &[-2.0, 5.0, 1.0]), 0.0).unwrap();
        assert_eq!(s.fused, sem);

        let z = map(2, 2, &[0.0; 4]);
        assert!(fuse(&z, &z, &z, 0.7).unwrap().fused.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(fuse(&z, &z, &z, -0.1), Err(Error::NegativeAlpha(_))));
        assert!(matches!(fuse(&z, &map(1, 4, &[0.0; 4]), &z, 0.7), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn topk_tie_break_and_small_cluster() {
        let s = fuse(&map(2, 2, &[0.9, 0.9, 0.1, 0.5]), &map(2, 2, &[0.0; 4]), &map(2, 2, &[0.0; 4]), 0.7).unwrap();
        let m = model(&[1, 1, 1, 2], 2, 2);
        let top = topk_per_cluster(&s, &m, 1);
        assert_eq!(top[0].len(), 1);
        assert_eq!(top[0][0].coord, PatchCoord::new(1, 1));
        let all = topk_per_cluster(&s, &m, 5);
        assert_eq!(all[0].len(), 3);
        assert_eq!(all[1].len(), 1);
    }

    #[test]
    fn nms_examples() {
        assert_eq!(grid_nms(&[cand(3, 3, 0.1)], 2.0).len(), 1);
        let kept = grid_nms(&[cand(1, 2, 0.8), cand(1, 1, 0.9)], 2.0);
        assert_eq!(kept, vec![cand(1, 1, 0.9)]);
        // exactly tau apart is kept
        assert_eq!(grid_nms(&[cand(1, 1, 0.9), cand(1, 3, 0.8)], 2.0).len(), 2);
        assert_eq!(grid_nms(&[cand(1, 1, 0.9), cand(1, 1, 0.8)], 0.0).len(), 2);
    }

    fn params() -> PackParams {
        PackParams {
            alpha: 0.7,
            k_clusters: 2,
            k1: 2,
            tau: 2.0,
            k_bands: 8,
            patch_size: 16,
            sigma: 1.0,
            epsilon: 1e-6,
            seed: 42,
        }
    }

    fn fixture() -> (PatchGrid, ImageBuffer) {
        let mut img = ImageBuffer::filled(64, 64, [10, 20, 30]);
        for y in 0..64 {
            for x in 0..64 {
                img.set_pixel(x, y, [x as u8 * 3, y as u8 * 3, (x ^ y) as u8]);
            }
        }
        let grid = crate::grid::decompose(&crate::grid::to_luma(&img), 16).unwrap();
        (grid, img)
    }

    #[test]
    fn pack_orders_clusters_by_best_score() {
        let (grid, img) = fixture();
        let mut a = cand(1, 1, 0.9);
        a.cluster = 1;
        let mut b1 = cand(4, 4, 1.2);
        b1.cluster = 2;
        let mut b2 = cand(2, 4, 0.3);
        b2.cluster = 2;
        let pack = assemble_pack(&[vec![a], vec![b2, b1]], &grid, &img, params(), "x", 8).unwrap();
        let order: Vec<_> = pack.entries.iter().map(|e| e.candidate.coord).collect();
        assert_eq!(order, vec![PatchCoord::new(4, 4), PatchCoord::new(2, 4), PatchCoord::new(1, 1)]);
        assert_eq!(pack.entries[2].crop.width(), 24);
        assert!(matches!(
            assemble_pack(&[vec![], vec![]], &grid, &img, params(), "x", 8),
            Err(Error::EmptyEvidence)
        ));
        let single = assemble_pack(&[vec![a]], &grid, &img, params(), "x", 0).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn serialize_round_trip() {
        let (grid, img) = fixture();
        let cands: Vec<Candidate> = (1..=4)
            .map(|i| Candidate {
                coord: PatchCoord::new(i, 5 - i),
                score: 0.1 * i as f64 + 1.0 / 3.0,
                cluster: i % 2 + 1,
                sem: 0.123456789,
                freq: 1e-17,
                noise: -3.5,
            })
            .collect();
        let pack = assemble_pack(std::slice::from_ref(&cands), &grid, &img, params(), "img-7", 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = serialize_pack(&pack, dir.path()).unwrap();
        assert_eq!(manifest, dir.path().join("pack.json"));
        for i in 0..4 {
            assert!(dir.path().join(format!("ev_{i}.png")).exists());
        }
        assert_eq!(load_pack(dir.path()).unwrap(), pack);

        let text = std::fs::read_to_string(&manifest).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&str> = value["entries"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut expected = vec!["r", "c", "cluster", "score", "sem", "freq", "noise", "box", "crop"];
        expected.sort();
        assert_eq!(keys, expected);
    }

    #[cfg(unix)]
    #[test]
    fn serialize_into_read_only_dir_fails() {
        use std::os::unix::fs::PermissionsExt;
        let (grid, img) = fixture();
        let pack = assemble_pack(&[vec![cand(1, 1, 1.0)]], &grid, &img, params(), "x", 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::set_permissions(dir.path(), std::fs::Permissions::from_mode(0o555)).unwrap();
        let probe = dir.path().join("probe");
        if std::fs::write(&probe, b"").is_err() {
            assert!(matches!(serialize_pack(&pack, dir.path()), Err(Error::Io(_))));
        }
        // root ignores permission bits, so also target a path that is a regular file
        let file = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(serialize_pack(&pack, file.path()), Err(Error::Io(_))));
    }
}
