use std::io;

use thiserror::Error;

/// Errors raised by the pooling, model, data and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("attention weights are produced by the model head and cannot be derived from scores")]
    AttentionWeights,

    #[error("scalar type does not support exp (exponential softmax needs a floating type)")]
    ExpUnsupported,

    #[error("stage plan {factors:?} does not divide {frames} frames")]
    InvalidPlan { factors: Vec<usize>, frames: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
