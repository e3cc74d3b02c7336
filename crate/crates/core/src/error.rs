//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph shape incompatibility.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value produced during a forward or backward pass.
    #[error("numeric error in `{layer}`: {detail}")]
    Numeric { layer: String, detail: String },

    /// Operation precondition violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// API misuse (e.g. an option combination that is not defined).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed file content (WAV, checkpoint, manifest, config).
    #[error("format error: {0}")]
    Format(String),

    /// Missing upstream artifact; names the stage that produces it.
    #[error("missing {artifact}; run {producer}")]
    MissingArtifact { artifact: String, producer: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { layer: layer.into(), detail: detail.into() }
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
