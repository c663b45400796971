use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: String, got: String },

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("backward needs intermediates from a forward pass run with caching enabled")]
    MissingCache,

    #[error("corrupt weight file: {0}")]
    Corrupt(String),

    #[error("weight file mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at step {step} ({detail}); last good checkpoint: {checkpoint:?}")]
    NonFiniteLoss { step: usize, detail: String, checkpoint: Option<PathBuf> },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Core(#[from] snapddm_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
