//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed data that violates a documented contract (shape, range, finiteness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation's precondition does not hold (e.g. empty buffer, too-short trajectory).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A computation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A component is not in the state the operation requires (e.g. untrained ensemble).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Underlying I/O failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or stream did not match the expected format.
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
