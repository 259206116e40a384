use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed data violating an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Numeric failure (singular system, non-finite loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (checkpoint, manifest, dataset descriptor).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
