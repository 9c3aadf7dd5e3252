use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the merging laboratory.
#[derive(Debug, Error)]
pub enum MergeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("missing file {}: {hint}", path.display())]
    MissingFile { path: PathBuf, hint: String },

    #[error("gate failed: {0}")]
    Gate(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MergeError>;

pub(crate) fn dim_err(what: impl Into<String>) -> MergeError {
    MergeError::Dimension(what.into())
}
