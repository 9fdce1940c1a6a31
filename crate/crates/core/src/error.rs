use std::path::PathBuf;

/// Errors raised anywhere in the evidence pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("image {width}x{height} is smaller than the {patch_size}px patch size")]
    ImageTooSmall {
        width: u32,
        height: u32,
        patch_size: u32,
    },

    #[error("box {0:?} lies outside the image bounds")]
    BoxOutOfBounds(crate::grid::PixelBox),

    #[error("region {0:?} lies outside the image bounds")]
    RegionOutOfBounds(crate::grid::PixelBox),

    #[error("operation needs at least one patch")]
    EmptyGrid,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("{bands} frequency bands do not fit a {patch_size}px patch")]
    InvalidBandCount { bands: usize, patch_size: usize },

    #[error("embedding file schema error: {0}")]
    Schema(String),

    #[error("embedding grid {found:?} does not match the image grid {expected:?}")]
    GridMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value at {0}")]
    NonFiniteValue(String),

    #[error("cannot form {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },

    #[error("cosine is undefined for a zero vector")]
    ZeroVector,

    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),

    #[error("no evidence candidates survived selection")]
    EmptyEvidence,

    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),

    #[error("request timed out after {attempts} attempt(s): {message}")]
    Timeout { attempts: u32, message: String },

    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("invalid manipulation: {0}")]
    InvalidManipulation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Encode(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Param(#[from] ParamError),
}

/// A run parameter outside its valid range.
#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum ParamError {
    #[error("alpha must be >= 0, got {0}")]
    Alpha(f64),
    #[error("k_clusters must be >= 1, got {0}")]
    Clusters(usize),
    #[error("k1 must be >= 1, got {0}")]
    K1(usize),
    #[error("tau must be >= 0, got {0}")]
    Tau(f64),
    #[error("patch_size must be >= 4, got {0}")]
    PatchSize(usize),
    #[error("sigma must be > 0, got {0}")]
    Sigma(f64),
    #[error("epsilon must be > 0, got {0}")]
    Epsilon(f64),
    #[error("k_bands must be between 1 and 2*(patch_size-1), got {0}")]
    Bands(usize),
    #[error("max_iter must be >= 1")]
    MaxIter,
}

impl ParamError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParamError::Alpha(_) => "InvalidAlpha",
            ParamError::Clusters(_) => "InvalidClusterCount",
            ParamError::K1(_) => "InvalidK1",
            ParamError::Tau(_) => "InvalidTau",
            ParamError::PatchSize(_) => "InvalidPatchSize",
            ParamError::Sigma(_) => "InvalidSigma",
            ParamError::Epsilon(_) => "InvalidEpsilon",
            ParamError::Bands(_) => "InvalidBandCount",
            ParamError::MaxIter => "InvalidMaxIter",
        }
    }
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FileNotFound(_) => "FileNotFound",
            Error::Decode(_) => "DecodeError",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::BoxOutOfBounds(_) => "BoxOutOfBounds",
            Error::RegionOutOfBounds(_) => "RegionOutOfBounds",
            Error::EmptyGrid => "EmptyGrid",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonPositiveSigma(_) => "NonPositiveSigma",
            Error::NonPositiveEpsilon(_) => "NonPositiveEpsilon",
            Error::InvalidBandCount { .. } => "InvalidBandCount",
            Error::Schema(_) => "SchemaError",
            Error::GridMismatch { .. } => "GridMismatch",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::TooManyClusters { .. } => "TooManyClusters",
            Error::ZeroVector => "ZeroVector",
            Error::NegativeAlpha(_) => "NegativeAlpha",
            Error::EmptyEvidence => "EmptyEvidence",
            Error::InvalidTemplate(_) => "InvalidTemplate",
            Error::Timeout { .. } => "Timeout",
            Error::Http { .. } => "HttpError",
            Error::MalformedResponse(_) => "MalformedResponse",
            Error::InvalidManipulation(_) => "InvalidManipulation",
            Error::Io(_) => "IoError",
            Error::Encode(_) => "EncodeError",
            Error::Json(_) => "JsonError",
            Error::Param(p) => p.kind(),
        }
    }

    /// Whether the error came from talking to the model backend.
    pub fn is_gateway(&self) -> bool {
        matches!(
            self,
            Error::Timeout { .. } | Error::Http { .. } | Error::MalformedResponse(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
