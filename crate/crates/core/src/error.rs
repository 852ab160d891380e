//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for configuration, shape, numeric, and I/O failures.
#[derive(Error, Debug)]
pub enum D2cError {
    /// Invalid configuration value or range.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid input (token index out of vocabulary, class out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// NaN/Inf encountered or a numeric routine failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar loss, empty mask, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A gradient-check oracle could not be trusted (non-deterministic f).
    #[error("unreliable oracle: {0}")]
    UnreliableOracle(String),

    /// File format error (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, D2cError>;

impl D2cError {
    pub fn config(msg: impl Into<String>) -> Self {
        D2cError::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        D2cError::Shape(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        D2cError::Input(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        D2cError::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        D2cError::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        D2cError::Format(msg.into())
    }
}
