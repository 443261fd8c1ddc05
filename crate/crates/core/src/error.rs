//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by corpus loading, model evaluation, training and
/// artifact persistence.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input record. Line numbers are 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Caller broke an API contract (programming error on the caller side).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation requires state that has not been established yet.
    #[error("invalid state: {0}")]
    State(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint directory is missing pieces or has an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
