use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("manifest line {line} ({utt_id}): {reason}")]
    Validation {
        line: usize,
        utt_id: String,
        reason: String,
    },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("unknown word {token:?} for language {language_id}")]
    UnknownWord { token: String, language_id: u32 },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("input too short: {len} frames, need at least {required}")]
    InputTooShort { len: usize, required: usize },

    #[error("undefined similarity: zero-norm input")]
    UndefinedSimilarity,

    #[error("non-finite {term} loss at step {step} (batch {batch:?})")]
    NonFinite {
        term: String,
        step: u64,
        batch: Vec<String>,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} needs migration; this build reads {supported}")]
    Migration { found: u32, supported: u32 },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parsable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Alignment(_) => "alignment",
            Error::Validation { .. } => "validation",
            Error::Registry(_) => "registry",
            Error::UnknownWord { .. } => "unknown_word",
            Error::Encoding(_) => "encoding",
            Error::InputTooShort { .. } => "input_too_short",
            Error::UndefinedSimilarity => "undefined_similarity",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Migration { .. } => "migration",
            Error::Setup(_) => "setup",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) | Error::TomlDe(_) | Error::TomlSer(_) => "parse",
        }
    }
}
