//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MctError {
    /// Tensor shapes incompatible for an operation. Message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Bad configuration value (model config, dataset spec, CLI knobs).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk data (MCT1 tensors, manifests, checkpoints).
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values or other numeric breakdown, with a location diagnostic.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MctError>;

impl MctError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MctError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        MctError::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        MctError::Format(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        MctError::Numerical(msg.into())
    }
}
