//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/parameter shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value constraint was violated (domain, divisibility, NaN, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A numeric invariant broke mid-computation (NaN/Inf, stage named).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed file content (image, checkpoint, config, tensor dump).
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
