use evidence_core::bench::synthesize_base;
use evidence_core::evidence::{load_pack, serialize_pack, MANIFEST_NAME};
use evidence_core::grid::{ImageBuffer, PatchCoord, PatchMap};
use evidence_core::pipeline::{mine, Embeddings, MineParams};
use evidence_core::semantics::{EmbeddingSet, EmbeddingSource};

#[test]
fn defaults_on_224_fit_the_token_budget() {
    let img = synthesize_base(224, 224, 3);
    let out = mine(&img, "base", &MineParams::default(), Embeddings::Intrinsic).unwrap();
    assert_eq!(out.grid_dims, (14, 14));
    assert_eq!(out.budget.total_patches, 196);
    assert_eq!(out.budget.max_pack_size, 16);
    assert!(out.pack.len() <= 16 && !out.pack.is_empty());
    assert!(out.budget.token_reduction >= 1.0 - 16.0 / 196.0);
    assert_eq!(out.embedding_source, EmbeddingSource::Intrinsic);
}

#[test]
fn mining_is_deterministic() {
    let img = synthesize_base(160, 128, 9);
    let p = MineParams::default();
    let a = mine(&img, "x", &p, Embeddings::Intrinsic).unwrap();
    let b = mine(&img, "x", &p, Embeddings::Intrinsic).unwrap();
    assert_eq!(a.pack, b.pack);
    assert_eq!(a.clusters.assignment, b.clusters.assignment);
}

#[test]
fn fused_score_rederives_from_components() {
    let img = synthesize_base(128, 128, 5);
    let p = MineParams { alpha: 0.3, ..Default::default() };
    let out = mine(&img, "x", &p, Embeddings::Intrinsic).unwrap();
    for (coord, s) in out.scores.fused.iter() {
        let want = out.scores.sem.get(coord) + 0.3 * (out.scores.freq.get(coord) + out.scores.noise.get(coord));
        assert!((s - want).abs() <= 1e-12);
    }
}

#[test]
fn pack_round_trips_through_disk() {
    let img = synthesize_base(96, 96, 1);
    let out = mine(&img, "disk", &MineParams::default(), Embeddings::Intrinsic).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = serialize_pack(&out.pack, dir.path()).unwrap();
    assert_eq!(manifest, dir.path().join(MANIFEST_NAME));
    for i in 0..out.pack.len() {
        assert!(dir.path().join(format!("ev_{i}.png")).exists());
    }
    assert_eq!(load_pack(dir.path()).unwrap(), out.pack);
}

#[test]
fn provided_embeddings_drive_clustering() {
    let img = synthesize_base(64, 64, 2);
    // left half points one way, right half the other
    let patches = PatchMap::from_fn(4, 4, |c: PatchCoord| if c.c <= 2 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
    let emb = EmbeddingSet::new(vec![1.0, 0.0], patches, EmbeddingSource::Ingested).unwrap();
    let p = MineParams { k_clusters: 2, ..Default::default() };
    let out = mine(&img, "x", &p, Embeddings::Provided(&emb)).unwrap();
    let left = out.clusters.cluster_of(PatchCoord::new(1, 1));
    for (coord, k) in out.clusters.assignment.iter() {
        assert_eq!(*k == left, coord.c <= 2);
    }
    assert!((out.scores.sem.get(PatchCoord::new(1, 4)) - 1.0).abs() < 1e-12);
}

#[test]
fn mismatched_embeddings_are_rejected() {
    let img = synthesize_base(64, 64, 2);
    let emb = EmbeddingSet::new(vec![1.0], PatchMap::from_fn(3, 4, |_| vec![1.0]), EmbeddingSource::Ingested).unwrap();
    let err = mine(&img, "x", &MineParams { k_clusters: 1, ..Default::default() }, Embeddings::Provided(&emb)).unwrap_err();
    assert_eq!(err.kind(), "GridMismatch");
}

#[test]
fn embeddings_file_is_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.json");
    let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64]).collect();
    let doc = serde_json::json!({ "dim": 2, "cls": [1.0, 0.0], "patches": rows, "grid": [2, 2] });
    std::fs::write(&path, doc.to_string()).unwrap();
    let img = ImageBuffer::filled(32, 32, [10, 20, 30]);
    let p = MineParams { k_clusters: 2, ..Default::default() };
    let out = mine(&img, "f", &p, Embeddings::File(&path)).unwrap();
    assert_eq!(out.embedding_source, EmbeddingSource::Ingested);
    assert_eq!(out.repaired_embeddings, 0);
    let err = mine(&img, "f", &p, Embeddings::File(&dir.path().join("missing.json"))).unwrap_err();
    assert_eq!(err.kind(), "FileNotFound");
}

#[test]
fn too_many_clusters_for_tiny_grid() {
    let img = ImageBuffer::filled(48, 16, [1, 2, 3]);
    let err = mine(&img, "x", &MineParams::default(), Embeddings::Intrinsic).unwrap_err();
    assert_eq!(err.kind(), "TooManyClusters");
}
