//! Crate-wide error type.
//!
//! The CLI maps these variants onto process exit codes, so the split
//! between configuration, numerical, and I/O failures is part of the
//! external contract rather than cosmetic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or arguments (bad shapes, unknown keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure such as a non-finite loss during training.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (vocabulary, packed dataset, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// Requested operation is undefined for the given model family.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Exhaustive enumeration was requested above the hard cap.
    #[error("enumeration bound exceeded: n = {n} is above the cap of {max}")]
    EnumerationBound { n: usize, max: usize },
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}
