mod config;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use evidence_core::bench::{self, BenchTemplate, ManipulationKind};
use evidence_core::evidence::{self, PackParams};
use evidence_core::gateway::{self, Label};
use evidence_core::grid;
use evidence_core::pipeline::{self, Embeddings, MineOutput, StageTimings};

use config::{ConfigArgs, RunConfig};

#[derive(Parser)]
#[command(name = "evidence", version, about = "Patch-level forgery evidence mining and detection")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine an evidence pack from one image and write it to --out
    Mine { image: PathBuf },
    /// Mine evidence and ask the backend for a Real/Fake verdict
    Detect { image: PathBuf },
    /// Run detection over every image in a directory
    Bench {
        dir: PathBuf,
        /// CSV of image_id,label
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Images processed concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Report zero stage timings so output is reproducible
        #[arg(long)]
        no_timing: bool,
    },
    /// Synthetic localization benchmark on generated manipulations
    Synthbench {
        #[arg(long, default_value_t = 100)]
        n_seeds: usize,
        #[arg(long, default_value = "splice_noise")]
        kind: ManipulationKind,
        #[arg(long, default_value_t = 0.2)]
        strength: f64,
        #[arg(long, default_value_t = 224)]
        width: u32,
        #[arg(long, default_value_t = 224)]
        height: u32,
        /// Side of the square manipulated region, in patches
        #[arg(long, default_value_t = 2)]
        region_patches: usize,
        /// Leading pack entries scored by hit_at_k
        #[arg(long, default_value_t = 1)]
        hit_k: usize,
    },
}

/// Error reported as `{"kind", "message"}` on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub exit: u8,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            exit: 2,
        }
    }
}

impl From<evidence_core::Error> for CliError {
    fn from(e: evidence_core::Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            exit: if e.is_gateway() { 3 } else { 2 },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_mine(path: &Path, cfg: &RunConfig) -> CliResult<(grid::ImageBuffer, MineOutput)> {
    let img = grid::load_image(path, cfg.params.patch_size as u32)?;
    let embeddings = match &cfg.embeddings {
        Some(p) => Embeddings::File(p),
        None => Embeddings::Intrinsic,
    };
    let out = pipeline::mine(&img, &image_id(path), &cfg.params, embeddings)?;
    Ok((img, out))
}

#[derive(Serialize)]
struct MineReport {
    image_id: String,
    pack_dir: PathBuf,
    pack_size: usize,
    total_patches: usize,
    max_pack_size: usize,
    token_reduction: f64,
    grid: [usize; 2],
    embeddings: &'static str,
    repaired_embeddings: usize,
    cluster_iterations: usize,
    converged: bool,
    params: PackParams,
}

fn cmd_mine(path: &Path, cfg: &RunConfig) -> CliResult<String> {
    let (_, out) = run_mine(path, cfg)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("evidence"));
    evidence::serialize_pack(&out.pack, &dir)?;
    let report = MineReport {
        image_id: out.pack.image_id.clone(),
        pack_dir: dir,
        pack_size: out.budget.pack_size,
        total_patches: out.budget.total_patches,
        max_pack_size: out.budget.max_pack_size,
        token_reduction: out.budget.token_reduction,
        grid: [out.grid_dims.0, out.grid_dims.1],
        embeddings: match out.embedding_source {
            evidence_core::semantics::EmbeddingSource::Ingested => "ingested",
            evidence_core::semantics::EmbeddingSource::Intrinsic => "intrinsic",
        },
        repaired_embeddings: out.repaired_embeddings,
        cluster_iterations: out.clusters.iterations,
        converged: out.clusters.converged,
        params: out.pack.params.clone(),
    };
    to_json(&report)
}

#[derive(Serialize)]
struct DetectReport {
    image_id: String,
    label: Label,
    raw_text: String,
    latency: f64,
    backend: String,
    pack_size: usize,
    total_patches: usize,
    token_reduction: f64,
    mean_score: f64,
    template_version: String,
    evidence_order: gateway::EvidenceOrder,
    params: PackParams,
}

fn detect_one(
    path: &Path,
    cfg: &RunConfig,
    tmpl: &gateway::PromptTemplate,
    backend: &gateway::Backend,
) -> CliResult<(DetectReport, StageTimings)> {
    let (img, out) = run_mine(path, cfg)?;
    if let Some(dir) = &cfg.out {
        evidence::serialize_pack(&out.pack, dir)?;
    }
    let pack = gateway::reorder_pack(&out.pack, cfg.evidence_order);
    let full = cfg.include_full_image.then_some(&img);
    let req = gateway::build_request(&pack, tmpl, full, &cfg.model)?;
    let verdict = gateway::query_backend(&req, backend)?;
    let report = DetectReport {
        image_id: out.pack.image_id.clone(),
        label: verdict.label,
        raw_text: verdict.raw_text,
        latency: verdict.latency,
        backend: verdict.backend,
        pack_size: out.budget.pack_size,
        total_patches: out.budget.total_patches,
        token_reduction: out.budget.token_reduction,
        mean_score: out.pack.mean_score().unwrap_or(0.0),
        template_version: tmpl.version.clone(),
        evidence_order: cfg.evidence_order,
        params: out.pack.params.clone(),
    };
    Ok((report, out.timings))
}

fn cmd_detect(path: &Path, cfg: &RunConfig) -> CliResult<String> {
    let tmpl = cfg.template()?;
    let backend = cfg.backend()?;
    let (report, _) = detect_one(path, cfg, &tmpl, &backend)?;
    to_json(&report)
}

#[derive(Serialize)]
struct BenchRow {
    image_id: String,
    truth: Option<Label>,
    #[serde(flatten)]
    outcome: RowOutcome,
    timings: StageTimings,
}

#[derive(Serialize)]
#[serde(untagged)]
enum RowOutcome {
    Done {
        label: Label,
        raw_text: String,
        latency: f64,
        pack_size: usize,
        mean_score: f64,
    },
    Failed {
        error: CliError,
    },
}

#[derive(Serialize, Default, Debug, PartialEq)]
struct Metrics {
    evaluated: usize,
    unparsed: usize,
    failed: usize,
    unlabeled: usize,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    accuracy: Option<f64>,
    f1: Option<f64>,
}

#[derive(Serialize)]
struct BatchResult {
    dir: PathBuf,
    images: usize,
    backend: &'static str,
    template_version: String,
    params: PackParams,
    metrics: Option<Metrics>,
    rows: Vec<BenchRow>,
}

fn parse_label(s: &str) -> Option<Label> {
    match s.trim().to_ascii_lowercase().as_str() {
        "real" => Some(Label::Real),
        "fake" => Some(Label::Fake),
        _ => None,
    }
}

fn read_labels(path: &Path) -> CliResult<HashMap<String, Label>> {
    let text = config::read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::new("LabelsError", e.to_string()))?;
        let (id, label) = match (record.get(0), record.get(1)) {
            (Some(id), Some(label)) => (id, label),
            _ => return Err(CliError::new("LabelsError", format!("row {}: expected image_id,label", i + 1))),
        };
        if i == 0 && id == "image_id" {
            continue;
        }
        let label = parse_label(label)
            .ok_or_else(|| CliError::new("LabelsError", format!("row {}: label must be Real or Fake, got {label:?}", i + 1)))?;
        labels.insert(id.to_string(), label);
    }
    Ok(labels)
}

/// Accuracy and F1 with Fake as the positive class; unparsed and failed rows are left out.
fn metrics(rows: &[BenchRow]) -> Metrics {
    let mut m = Metrics::default();
    for row in rows {
        let Some(truth) = row.truth else {
            m.unlabeled += 1;
            continue;
        };
        match &row.outcome {
            RowOutcome::Failed { .. } => m.failed += 1,
            RowOutcome::Done { label: Label::Unparsed, .. } => m.unparsed += 1,
            RowOutcome::Done { label, .. } => {
                m.evaluated += 1;
                match (truth, *label) {
                    (Label::Fake, Label::Fake) => m.tp += 1,
                    (Label::Real, Label::Fake) => m.fp += 1,
                    (Label::Fake, _) => m.fn_ += 1,
                    _ => m.tn += 1,
                }
            }
        }
    }
    if m.evaluated > 0 {
        m.accuracy = Some((m.tp + m.tn) as f64 / m.evaluated as f64);
    }
    let denom = 2 * m.tp + m.fp + m.fn_;
    if denom > 0 {
        m.f1 = Some(2.0 * m.tp as f64 / denom as f64);
    }
    m
}

fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(evidence_core::Error::FileNotFound(dir.to_path_buf()).into());
    }
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(evidence_core::Error::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(CliError::new("EmptyDirectory", format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(images)
}

fn cmd_bench(dir: &Path, labels: Option<&Path>, jobs: usize, no_timing: bool, cfg: &RunConfig) -> CliResult<String> {
    let images = list_images(dir)?;
    let truth = labels.map(read_labels).transpose()?;
    let tmpl = cfg.template()?;
    let backend = cfg.backend()?;
    // packs are not written per image in batch mode
    let row_cfg = RunConfig { out: None, ..cfg.clone() };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::new("ThreadPoolError", e.to_string()))?;
    let rows: Vec<BenchRow> = pool.install(|| {
        images
            .par_iter()
            .map(|path| {
                let id = image_id(path);
                let (outcome, timings) = match detect_one(path, &row_cfg, &tmpl, &backend) {
                    Ok((r, t)) => (
                        RowOutcome::Done {
                            label: r.label,
                            raw_text: r.raw_text,
                            latency: r.latency,
                            pack_size: r.pack_size,
                            mean_score: r.mean_score,
                        },
                        t,
                    ),
                    Err(error) => (RowOutcome::Failed { error }, StageTimings::default()),
                };
                BenchRow {
                    truth: truth.as_ref().and_then(|t| t.get(&id).copied()),
                    image_id: id,
                    outcome,
                    timings: if no_timing { StageTimings::default() } else { timings },
                }
            })
            .collect()
    });
    let result = BatchResult {
        dir: dir.to_path_buf(),
        images: rows.len(),
        backend: backend.name(),
        template_version: tmpl.version.clone(),
        params: cfg.params.pack_params(),
        metrics: truth.as_ref().map(|_| metrics(&rows)),
        rows,
    };
    to_json(&result)
}

fn cmd_synthbench(template: &BenchTemplate, n_seeds: usize, cfg: &RunConfig) -> CliResult<String> {
    let report = bench::evaluate_localization(n_seeds, template, &cfg.params)?;
    let json = to_json(&report)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(evidence_core::Error::Io)?;
    std::fs::write(dir.join("report.json"), format!("{json}\n")).map_err(evidence_core::Error::Io)?;
    Ok(json)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| evidence_core::Error::Json(e).into())
}

fn run(cli: Cli) -> CliResult<String> {
    let cfg = RunConfig::resolve(&cli.config)?;
    match cli.command {
        Command::Mine { image } => cmd_mine(&image, &cfg),
        Command::Detect { image } => cmd_detect(&image, &cfg),
        Command::Bench {
            dir,
            labels,
            jobs,
            no_timing,
        } => cmd_bench(&dir, labels.as_deref(), jobs, no_timing, &cfg),
        Command::Synthbench {
            n_seeds,
            kind,
            strength,
            width,
            height,
            region_patches,
            hit_k,
        } => {
            let template = BenchTemplate {
                kind,
                strength,
                width,
                height,
                region_patches: (region_patches, region_patches),
                hit_k,
            };
            cmd_synthbench(&template, n_seeds, &cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(json) => {
            println!("{json}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).unwrap_or_else(|_| e.message.clone()));
            ExitCode::from(e.exit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(truth: Option<Label>, label: Label) -> BenchRow {
        BenchRow {
            image_id: "x".into(),
            truth,
            outcome: RowOutcome::Done {
                label,
                raw_text: String::new(),
                latency: 0.0,
                pack_size: 1,
                mean_score: 0.0,
            },
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let rows = vec![
            row(Some(Label::Fake), Label::Fake),
            row(Some(Label::Fake), Label::Fake),
            row(Some(Label::Real), Label::Real),
            row(Some(Label::Real), Label::Real),
        ];
        let m = metrics(&rows);
        assert_eq!((m.accuracy, m.f1), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn f1_without_positives_is_null() {
        let m = metrics(&[row(Some(Label::Real), Label::Real), row(Some(Label::Real), Label::Real)]);
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.f1, None);
    }

    #[test]
    fn unparsed_and_unlabeled_are_excluded() {
        let m = metrics(&[
            row(Some(Label::Fake), Label::Unparsed),
            row(None, Label::Fake),
            row(Some(Label::Fake), Label::Real),
            row(Some(Label::Real), Label::Fake),
        ]);
        assert_eq!((m.unparsed, m.unlabeled, m.evaluated), (1, 1, 2));
        assert_eq!(m.accuracy, Some(0.0));
        assert_eq!(m.f1, Some(0.0));
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_label(" FAKE "), Some(Label::Fake));
        assert_eq!(parse_label("real"), Some(Label::Real));
        assert_eq!(parse_label("maybe"), None);
    }
}
