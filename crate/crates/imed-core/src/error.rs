//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, forward passes and the harness.
#[derive(Error, Debug)]
pub enum ImedError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("source batch is missing labels")]
    MissingLabels,
    #[error("labels are not allowed on a target batch")]
    UnexpectedLabels,
    #[error("random projection required when d_f*d_g > {threshold} (got {product})")]
    MissingProjection { threshold: usize, product: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ImedError>;

impl ImedError {
    pub fn config(msg: impl Into<String>) -> Self {
        ImedError::Config(msg.into())
    }

    pub fn dimension(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        ImedError::Dimension {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
