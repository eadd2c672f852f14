use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's contract
    /// (dimension mismatch, unknown identifier, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that should satisfy a geometric invariant does not.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Input data is malformed or inconsistent.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training produced non-finite values.
    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_argument(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_state(msg: impl Into<String>) -> Error {
    Error::InvalidState(msg.into())
}
