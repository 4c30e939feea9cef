//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or layer shapes. The message always carries the
    /// offending shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value (bad architecture name, out-of-range
    /// hyperparameter, unusable sparsity target, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar loss, finalize called twice,
    /// inconsistent threshold/count pair, empty dataset, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Runtime data validation failed (label out of range, non-finite input).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not match its on-disk format. `offset` is the byte (or row,
    /// for text formats) at which decoding failed.
    #[error("format error in {path} at offset {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Numerical failure during training or scoring (NaN/Inf loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A prerequisite artifact (checkpoint, score file, mask) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
