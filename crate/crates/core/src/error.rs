use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. Carries a diagnostic describing
    /// both the expected and the offending shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (bad ranges, inconsistent modes, unknown keys).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, manifest, or file-format problems.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite loss, unresolvable target, degenerate input).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
