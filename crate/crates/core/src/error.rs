use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic")]
    BadMagic,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("manifest line {line}: {kind}")]
    Manifest { line: usize, kind: ManifestErrorKind },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("network_kind mismatch: checkpoint holds {found}, target is {expected}")]
    NetworkKindMismatch { expected: String, found: String },

    #[error("no foreground")]
    NoForeground,

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestErrorKind {
    BadHeader(String),
    UnknownModality(String),
    BadLabel(String),
    NonIntegerFss(String),
    DuplicateKey(String),
    MissingField(String),
    Empty,
}

impl std::fmt::Display for ManifestErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadHeader(h) => write!(f, "bad header {h:?}"),
            Self::UnknownModality(m) => write!(f, "unknown modality {m:?}"),
            Self::BadLabel(v) => write!(f, "label must be 0, 1 or empty, got {v:?}"),
            Self::NonIntegerFss(v) => write!(f, "fss_score must be a non-negative integer, got {v:?}"),
            Self::DuplicateKey(k) => write!(f, "duplicate row key {k}"),
            Self::MissingField(name) => write!(f, "missing field {name}"),
            Self::Empty => write!(f, "manifest has no records"),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable short identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::BadMagic => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::PayloadLength { .. } => "payload_length",
            Error::Header(_) => "header",
            Error::Manifest { .. } => "manifest",
            Error::Checkpoint(_) => "checkpoint",
            Error::NetworkKindMismatch { .. } => "network_kind_mismatch",
            Error::NoForeground => "no_foreground",
            Error::AucUndefined(_) => "auc_undefined",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True for failures of the environment rather than of the inputs.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
