//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all fallible operations.
#[derive(Error, Debug)]
pub enum Error {
    /// A derived configuration is inconsistent (shape laws, plan mismatches,
    /// invalid hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data is malformed (shape mismatch, label out of range).
    #[error("input error: {0}")]
    Input(String),

    /// An operation was invoked in a state that does not admit it
    /// (non-scalar loss, missing gradient, empty dataset).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numerically undefined quantity was encountered (zero norm, NaN).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file did not conform to its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code class: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 1,
            _ => 2,
        }
    }
}
