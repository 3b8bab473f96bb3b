//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A value left the mathematical domain of an operation (e.g. a zero
    /// prior entry where a logarithm is required).
    #[error("domain error: {0}")]
    Domain(String),

    /// Array shapes do not line up with the architecture descriptor.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Training produced a non-finite loss; the offending step was aborted.
    #[error("numerical failure at iteration {iteration}: {diagnostics}")]
    NonFinite { iteration: u64, diagnostics: String },

    /// A persisted file does not match the expected schema.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
