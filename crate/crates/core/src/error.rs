//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A scatterer violates the waveform's unambiguous range/velocity limits.
    #[error("unambiguous-limit violation: {0}")]
    RangeViolation(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation undefined on an empty point set.
    #[error("empty point set in {0}")]
    EmptyPointSet(&'static str),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training aborted on a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed file contents.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
