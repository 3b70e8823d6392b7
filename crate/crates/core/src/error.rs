use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdcError>;

#[derive(Debug, Error)]
pub enum HdcError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm row {row} in {which} operand of cosine similarity")]
    ZeroNorm { which: &'static str, row: usize },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HdcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdcError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HdcError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by bad user input rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HdcError::InvalidArgument(_) | HdcError::Config(_) | HdcError::Json(_)
        )
    }
}
