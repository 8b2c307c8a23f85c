use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpodError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("invalid label at line {line}: {value}")]
    InvalidLabel { line: usize, value: String },

    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("encoder is frozen; {0} must not mutate it")]
    Frozen(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostics: String,
    },

    #[error("container format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DpodError>;

impl DpodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpodError::Io {
            path: path.into(),
            source,
        }
    }
}
