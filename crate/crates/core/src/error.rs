use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum GmmError {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A numerical operation that should succeed for valid inputs failed.
    #[error("internal numerical failure: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, GmmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(GmmError::InvalidArgument(msg.into()))
}
