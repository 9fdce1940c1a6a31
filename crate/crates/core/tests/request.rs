use evidence_core::bench::synthesize_base;
use evidence_core::evidence::EvidencePack;
use evidence_core::gateway::*;
use evidence_core::pipeline::{mine, Embeddings, MineParams};

fn pack_of(n: usize) -> (EvidencePack, evidence_core::grid::ImageBuffer) {
    let img = synthesize_base(128, 128, 11);
    let mut pack = mine(&img, "req", &MineParams::default(), Embeddings::Intrinsic).unwrap().pack;
    assert!(pack.len() >= n);
    pack.entries.truncate(n);
    (pack, img)
}

#[test]
fn part_layout() {
    let (pack, img) = pack_of(4);
    let tmpl = PromptTemplate::default();
    let req = build_request(&pack, &tmpl, None, "m").unwrap();
    assert_eq!(req.parts.len(), 10);
    assert_eq!(req.image_count(), 4);
    assert!(matches!(req.parts.last(), Some(Part::Text(q)) if *q == tmpl.question_text));

    let full = build_request(&pack, &tmpl, Some(&img), "m").unwrap();
    assert_eq!(full.parts.len(), 11);
    assert!(matches!(&full.parts[9], Part::Image(_)));
    assert_eq!(full.temperature, 0.0);
    assert_eq!(full.max_tokens, 16);
}

#[test]
fn empty_pack_is_rejected() {
    let (mut pack, _) = pack_of(1);
    pack.entries.clear();
    let err = build_request(&pack, &PromptTemplate::default(), None, "m").unwrap_err();
    assert_eq!(err.kind(), "EmptyEvidence");
}

#[test]
fn request_body_is_deterministic() {
    let (pack, _) = pack_of(3);
    let a = build_request(&pack, &PromptTemplate::default(), None, "m").unwrap().to_body().unwrap();
    let b = build_request(&pack, &PromptTemplate::default(), None, "m").unwrap().to_body().unwrap();
    assert_eq!(a, b);
}

#[test]
fn mock_threshold_extremes() {
    let (pack, _) = pack_of(3);
    let req = build_request(&pack, &PromptTemplate::default(), None, "m").unwrap();
    let real = query_backend(&req, &Backend::Mock { threshold: f64::INFINITY }).unwrap();
    assert_eq!(real.label, Label::Real);
    let fake = query_backend(&req, &Backend::Mock { threshold: f64::NEG_INFINITY }).unwrap();
    assert_eq!(fake.label, Label::Fake);
}

#[test]
fn evidence_orders() {
    let (pack, _) = pack_of(4);
    assert_eq!(reorder_pack(&pack, EvidenceOrder::Pack), pack);
    let rev = reorder_pack(&pack, EvidenceOrder::Reversed);
    assert_eq!(rev.entries.first(), pack.entries.last());
    let raster = reorder_pack(&pack, EvidenceOrder::Raster);
    assert!(raster.entries.windows(2).all(|w| w[0].candidate.coord < w[1].candidate.coord));
    assert_eq!("raster".parse::<EvidenceOrder>(), Ok(EvidenceOrder::Raster));
}
