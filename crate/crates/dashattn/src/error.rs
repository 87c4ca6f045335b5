//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

/// Errors surfaced by the reference implementation.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A softmax row had no unmasked entries to normalize over.
    #[error("degenerate row {row}: no unmasked entries")]
    DegenerateRow { row: usize },

    /// An argument fell outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violated its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or truncated tensor/mask file.
    #[error("format error: {0}")]
    Format(String),

    /// A forward trace is missing, stale, or inconsistent with the inputs.
    #[error("trace error: {0}")]
    Trace(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
