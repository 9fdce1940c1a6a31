//! Run configuration: defaults, then a flat `key = value` file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, ValueEnum};
use evidence_core::gateway::{self, Backend, BackendConfig, EvidenceOrder};
use evidence_core::pipeline::MineParams;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

/// Flags shared by every subcommand. Unset flags fall through to the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub k_clusters: Option<usize>,
    #[arg(long, global = true)]
    pub k_bands: Option<usize>,
    #[arg(long, global = true)]
    pub k1: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Pixels of context around each evidence crop
    #[arg(long, global = true)]
    pub margin: Option<u32>,
    /// Patch embeddings JSON from an external encoder (default: intrinsic descriptors)
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Prompt template JSON
    #[arg(long, global = true)]
    pub prompt_template: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub mock_threshold: Option<f64>,
    /// Chat-completions URL (default: $EVIDENCE_LVLM_ENDPOINT)
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Model name sent to the backend (default: $EVIDENCE_LVLM_MODEL)
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Per-request timeout in seconds
    #[arg(long, global = true)]
    pub timeout: Option<f64>,
    #[arg(long, global = true)]
    pub retries: Option<u32>,
    /// First retry delay in seconds; doubles per retry
    #[arg(long, global = true)]
    pub backoff: Option<f64>,
    /// Also send the whole image after the evidence crops
    #[arg(long, global = true)]
    pub include_full_image: bool,
    /// Evidence presentation order: pack, reversed or raster
    #[arg(long, global = true)]
    pub evidence_order: Option<EvidenceOrder>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub params: MineParams,
    pub embeddings: Option<PathBuf>,
    pub backend: BackendKind,
    pub prompt_template: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mock_threshold: f64,
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout: f64,
    pub retries: u32,
    pub backoff: f64,
    pub include_full_image: bool,
    pub evidence_order: EvidenceOrder,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: MineParams::default(),
            embeddings: None,
            backend: BackendKind::Mock,
            prompt_template: None,
            out: None,
            mock_threshold: gateway::DEFAULT_MOCK_THRESHOLD,
            endpoint: None,
            model: "default".into(),
            timeout: 60.0,
            retries: 3,
            backoff: 1.0,
            include_full_image: false,
            evidence_order: EvidenceOrder::Pack,
        }
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::new("ConfigError", message)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_error(format!("bad value {value:?} for {key}: {e}")))
}

/// Reads `key = value` lines; `#` starts a comment, keys accept `-` or `_`.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(format!("line {}: expected key = value", n + 1)))?;
        out.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    fn apply_entry(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let p = &mut self.params;
        match key {
            "alpha" => p.alpha = parse_value(key, value)?,
            "k_clusters" => p.k_clusters = parse_value(key, value)?,
            "k_bands" => p.k_bands = parse_value(key, value)?,
            "k1" => p.k1 = parse_value(key, value)?,
            "tau" => p.tau = parse_value(key, value)?,
            "patch_size" => p.patch_size = parse_value(key, value)?,
            "sigma" => p.sigma = parse_value(key, value)?,
            "epsilon" => p.epsilon = parse_value(key, value)?,
            "seed" => p.seed = parse_value(key, value)?,
            "max_iter" => p.max_iter = parse_value(key, value)?,
            "margin" => p.margin = parse_value(key, value)?,
            "embeddings" => self.embeddings = Some(value.into()),
            "backend" => self.backend = parse_value(key, value)?,
            "prompt_template" => self.prompt_template = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "mock_threshold" => self.mock_threshold = parse_value(key, value)?,
            "endpoint" => self.endpoint = Some(value.into()),
            "model" => self.model = value.into(),
            "timeout" => self.timeout = parse_value(key, value)?,
            "retries" => self.retries = parse_value(key, value)?,
            "backoff" => self.backoff = parse_value(key, value)?,
            "include_full_image" => self.include_full_image = parse_value(key, value)?,
            "evidence_order" => self.evidence_order = parse_value(key, value)?,
            other => return Err(config_error(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults, then environment, then the config file, then flags; validated before use.
    pub fn resolve(args: &ConfigArgs) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Ok(endpoint) = std::env::var(gateway::ENV_ENDPOINT) {
            cfg.endpoint = Some(endpoint);
        }
        if let Ok(model) = std::env::var(gateway::ENV_MODEL) {
            cfg.model = model;
        }
        if let Some(path) = &args.config {
            let text = read_text(path)?;
            for (key, value) in parse_config_file(&text)? {
                cfg.apply_entry(&key, &value)?;
            }
        }
        let p = &mut cfg.params;
        macro_rules! set {
            ($field:ident, $target:expr) => {
                if let Some(v) = args.$field.clone() {
                    $target = v;
                }
            };
        }
        set!(alpha, p.alpha);
        set!(k_clusters, p.k_clusters);
        set!(k_bands, p.k_bands);
        set!(k1, p.k1);
        set!(tau, p.tau);
        set!(patch_size, p.patch_size);
        set!(sigma, p.sigma);
        set!(epsilon, p.epsilon);
        set!(seed, p.seed);
        set!(max_iter, p.max_iter);
        set!(margin, p.margin);
        if args.embeddings.is_some() {
            cfg.embeddings = args.embeddings.clone();
        }
        set!(backend, cfg.backend);
        if args.prompt_template.is_some() {
            cfg.prompt_template = args.prompt_template.clone();
        }
        if args.out.is_some() {
            cfg.out = args.out.clone();
        }
        set!(mock_threshold, cfg.mock_threshold);
        if args.endpoint.is_some() {
            cfg.endpoint = args.endpoint.clone();
        }
        set!(model, cfg.model);
        set!(timeout, cfg.timeout);
        set!(retries, cfg.retries);
        set!(backoff, cfg.backoff);
        set!(evidence_order, cfg.evidence_order);
        cfg.include_full_image |= args.include_full_image;

        cfg.params.validate().map_err(evidence_core::Error::from)?;
        if !(cfg.timeout > 0.0) || !cfg.timeout.is_finite() {
            return Err(CliError::new("InvalidTimeout", format!("timeout must be > 0, got {}", cfg.timeout)));
        }
        if !(cfg.backoff >= 0.0) || !cfg.backoff.is_finite() {
            return Err(CliError::new("InvalidBackoff", format!("backoff must be >= 0, got {}", cfg.backoff)));
        }
        if cfg.mock_threshold.is_nan() {
            return Err(CliError::new("InvalidThreshold", "mock threshold is NaN"));
        }
        Ok(cfg)
    }

    pub fn backend(&self) -> Result<Backend, CliError> {
        match self.backend {
            BackendKind::Mock => Ok(Backend::Mock {
                threshold: self.mock_threshold,
            }),
            BackendKind::Http => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    CliError::new(
                        "MissingEndpoint",
                        format!("http backend needs --endpoint or ${}", gateway::ENV_ENDPOINT),
                    )
                })?;
                Ok(Backend::Http(BackendConfig {
                    endpoint,
                    token: std::env::var(gateway::ENV_TOKEN).ok(),
                    timeout: Duration::from_secs_f64(self.timeout),
                    retries: self.retries,
                    backoff: Duration::from_secs_f64(self.backoff),
                }))
            }
        }
    }

    pub fn template(&self) -> Result<gateway::PromptTemplate, CliError> {
        match &self.prompt_template {
            None => Ok(gateway::PromptTemplate::default()),
            Some(path) => Ok(gateway::PromptTemplate::from_json(&read_text(path)?)?),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(evidence_core::Error::FileNotFound(path.to_path_buf()).into());
    }
    std::fs::read_to_string(path).map_err(|e| evidence_core::Error::Io(e).into())
}
