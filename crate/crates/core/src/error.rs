//! Error type shared by every module.

use thiserror::Error;

/// Library-wide error. Variants mirror the contract failures each operation
/// can report: shape mismatches, out-of-range queries, invalid configuration,
/// malformed files, and unusable inputs.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/axis shape disagrees with what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// A coordinate or index is outside its valid range.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violates its constraints.
    #[error("config error: {0}")]
    Config(String),
    /// A file does not conform to its format.
    #[error("format error: {0}")]
    Format(String),
    /// Input data cannot be processed (too short, single-class, ...).
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
