//! Conditioning an external multimodal chat model on an evidence pack and reading its verdict.
//!
//! Requests use the common chat-completions wire format: a system message followed by one
//! user message whose content interleaves text parts and base64 PNG `image_url` parts.

use std::fmt;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EvidencePack;
use crate::grid::ImageBuffer;

pub const ENV_ENDPOINT: &str = "EVIDENCE_LVLM_ENDPOINT";
pub const ENV_TOKEN: &str = "EVIDENCE_LVLM_TOKEN";
pub const ENV_MODEL: &str = "EVIDENCE_LVLM_MODEL";

pub const VERDICT_MAX_TOKENS: u32 = 16;
/// Separates clean synthetic bases from noise splices at default parameters.
pub const DEFAULT_MOCK_THRESHOLD: f64 = 3.0;

const PLACEHOLDERS: [&str; 4] = ["idx", "r", "c", "score"];

/// Prompt text around the evidence crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub version: String,
    pub system_text: String,
    /// May reference `{idx}`, `{r}`, `{c}` and `{score}`.
    pub per_evidence_caption: String,
    pub question_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: "evidence-prompt/1".into(),
            system_text: "You are an image forensics analyst. You will see the most suspicious \
                          patches mined from one image, each with its grid position and anomaly \
                          score."
                .into(),
            per_evidence_caption: "Evidence {idx}: patch at row {r}, column {c}, score={score}".into(),
            question_text: "Judging only from these evidence patches, has the image been \
                            manipulated or synthesized? Answer with exactly one word: \"Real\" or \
                            \"Fake\"."
                .into(),
        }
    }
}

impl PromptTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        let tmpl: Self = serde_json::from_str(text).map_err(|e| Error::InvalidTemplate(e.to_string()))?;
        tmpl.validate()?;
        Ok(tmpl)
    }

    pub fn validate(&self) -> Result<()> {
        if self.question_text.trim().is_empty() {
            return Err(Error::InvalidTemplate("question_text is empty".into()));
        }
        let mut rest = self.per_evidence_caption.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| Error::InvalidTemplate("unclosed '{' in caption".into()))?;
            let name = &after[..close];
            if !PLACEHOLDERS.contains(&name) {
                return Err(Error::InvalidTemplate(format!("unknown placeholder {{{name}}}")));
            }
            rest = &after[close + 1..];
        }
        Ok(())
    }

    pub fn caption(&self, idx: usize, r: usize, c: usize, score: f64) -> String {
        self.per_evidence_caption
            .replace("{idx}", &idx.to_string())
            .replace("{r}", &r.to_string())
            .replace("{c}", &c.to_string())
            .replace("{score}", &format!("{score:.6}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Part {
    Text(String),
    /// PNG-encoded image bytes.
    Image(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRequest {
    pub model: String,
    pub parts: Vec<Part>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl DetectionRequest {
    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, Part::Image(_))).count()
    }

    /// Chat-completions JSON body. Identical requests give identical bytes.
    pub fn to_body(&self) -> Result<String> {
        let mut parts = self.parts.iter();
        let system = match parts.next() {
            Some(Part::Text(t)) => t.clone(),
            _ => return Err(Error::InvalidTemplate("request must start with system text".into())),
        };
        let engine = base64::engine::general_purpose::STANDARD;
        let content = parts
            .map(|p| match p {
                Part::Text(text) => ContentPart::Text { text: text.clone() },
                Part::Image(png) => ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: format!("data:image/png;base64,{}", engine.encode(png)),
                    },
                },
            })
            .collect();
        let body = ChatBody {
            model: &self.model,
            messages: vec![
                Message::System { content: system },
                Message::User { content },
            ],
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stream: false,
        };
        Ok(serde_json::to_string(&body)?)
    }
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<Message>,
    temperature: f64,
    max_tokens: u32,
    stream: bool,
}

#[derive(Serialize)]
#[serde(tag = "role", rename_all = "lowercase")]
enum Message {
    System { content: String },
    User { content: Vec<ContentPart> },
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Serialize)]
struct ImageUrl {
    url: String,
}

/// Order in which evidence is presented to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceOrder {
    /// Pack order (cluster strength, then score).
    #[default]
    Pack,
    Reversed,
    /// Row-major grid position.
    Raster,
}

impl std::str::FromStr for EvidenceOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pack" => Ok(Self::Pack),
            "reversed" => Ok(Self::Reversed),
            "raster" => Ok(Self::Raster),
            other => Err(format!("unknown evidence order {other:?}")),
        }
    }
}

pub fn reorder_pack(pack: &EvidencePack, order: EvidenceOrder) -> EvidencePack {
    let mut out = pack.clone();
    match order {
        EvidenceOrder::Pack => {}
        EvidenceOrder::Reversed => out.entries.reverse(),
        EvidenceOrder::Raster => out.entries.sort_by_key(|e| e.candidate.coord),
    }
    out
}

/// `[system] ++ [caption, crop]* ++ [full image]? ++ [question]`.
pub fn build_request(
    pack: &EvidencePack,
    tmpl: &PromptTemplate,
    full_image: Option<&ImageBuffer>,
    model: &str,
) -> Result<DetectionRequest> {
    if pack.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    tmpl.validate()?;
    let mut parts = vec![Part::Text(tmpl.system_text.clone())];
    for (i, entry) in pack.entries.iter().enumerate() {
        let c = &entry.candidate;
        parts.push(Part::Text(tmpl.caption(i + 1, c.coord.r, c.coord.c, c.score)));
        parts.push(Part::Image(entry.crop.to_png()?));
    }
    if let Some(img) = full_image {
        parts.push(Part::Image(img.to_png()?));
    }
    parts.push(Part::Text(tmpl.question_text.clone()));
    Ok(DetectionRequest {
        model: model.to_string(),
        parts,
        temperature: 0.0,
        max_tokens: VERDICT_MAX_TOKENS,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
    Unparsed,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "Real",
            Label::Fake => "Fake",
            Label::Unparsed => "Unparsed",
        })
    }
}

/// Finds whole-word "real"/"fake" (any case); the last one mentioned wins.
pub fn parse_verdict(text: &str) -> Label {
    text.split(|ch: char| !ch.is_alphanumeric())
        .filter_map(|w| {
            if w.eq_ignore_ascii_case("real") {
                Some(Label::Real)
            } else if w.eq_ignore_ascii_case("fake") {
                Some(Label::Fake)
            } else {
                None
            }
        })
        .next_back()
        .unwrap_or(Label::Unparsed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub label: Label,
    pub raw_text: String,
    /// Seconds spent on the backend round trip; zero for the mock.
    pub latency: f64,
    pub backend: String,
}

fn caption_scores(req: &DetectionRequest) -> Vec<f64> {
    req.parts
        .iter()
        .filter_map(|p| match p {
            Part::Text(t) => t.find("score=").map(|i| &t[i + "score=".len()..]),
            Part::Image(_) => None,
        })
        .filter_map(|tail| {
            let end = tail
                .find(|ch: char| !(ch.is_ascii_digit() || matches!(ch, '.' | '-' | '+' | 'e' | 'E')))
                .unwrap_or(tail.len());
            tail[..end].parse::<f64>().ok()
        })
        .collect()
}

/// Offline backend: "Fake" when the mean caption score (`score=<x>`) exceeds `threshold`.
pub fn mock_backend(req: &DetectionRequest, threshold: f64) -> String {
    let scores = caption_scores(req);
    if scores.is_empty() {
        return "Real".into();
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    if mean > threshold { "Fake" } else { "Real" }.into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubles on every further retry.
    pub backoff: Duration,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backend {
    Mock { threshold: f64 },
    Http(BackendConfig),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Mock { .. } => "mock",
            Backend::Http(_) => "http",
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<ResponseContent>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResponseContent {
    Text(String),
    Parts(Vec<ResponsePart>),
}

#[derive(Deserialize)]
struct ResponsePart {
    text: Option<String>,
}

/// Text of the first choice in a chat-completions response.
pub fn response_text(body: &str) -> Result<String> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::MalformedResponse("no choices".into()))?;
    match choice.message.content {
        Some(ResponseContent::Text(t)) => Ok(t),
        Some(ResponseContent::Parts(parts)) => {
            let text: Vec<String> = parts.into_iter().filter_map(|p| p.text).collect();
            if text.is_empty() {
                Err(Error::MalformedResponse("content has no text parts".into()))
            } else {
                Ok(text.join(""))
            }
        }
        None => Err(Error::MalformedResponse("missing message content".into())),
    }
}

fn post_once(agent: &ureq::Agent, cfg: &BackendConfig, body: &str) -> std::result::Result<(u16, String), ureq::Error> {
    let mut req = agent
        .post(cfg.endpoint.as_str())
        .header("Content-Type", "application/json");
    if let Some(token) = &cfg.token {
        req = req.header("Authorization", format!("Bearer {token}"));
    }
    let mut resp = req.send(body)?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string()?;
    Ok((status, text))
}

fn query_http(req: &DetectionRequest, cfg: &BackendConfig) -> Result<Verdict> {
    let body = req.to_body()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let started = Instant::now();
    let mut attempt = 0;
    let (status, text) = loop {
        attempt += 1;
        match post_once(&agent, cfg, &body) {
            Ok(ok) => break ok,
            Err(e) if attempt > cfg.retries => {
                return Err(Error::Timeout {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
            Err(_) => std::thread::sleep(cfg.backoff * 2u32.pow(attempt - 1)),
        }
    };
    if !(200..300).contains(&status) {
        return Err(Error::Http { status, body: text });
    }
    let raw_text = response_text(&text)?;
    Ok(Verdict {
        label: parse_verdict(&raw_text),
        raw_text,
        latency: started.elapsed().as_secs_f64(),
        backend: "http".into(),
    })
}

/// Sends one request; an unparseable answer is a valid `Unparsed` verdict, never retried.
pub fn query_backend(req: &DetectionRequest, backend: &Backend) -> Result<Verdict> {
    match backend {
        Backend::Mock { threshold } => {
            let raw_text = mock_backend(req, *threshold);
            Ok(Verdict {
                label: parse_verdict(&raw_text),
                raw_text,
                latency: 0.0,
                backend: "mock".into(),
            })
        }
        Backend::Http(cfg) => query_http(req, cfg),
    }
}
