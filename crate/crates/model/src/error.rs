use molprompt_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("nothing to optimize: every atom is protected and no atoms are added")]
    NothingToOptimize,
    #[error("anchor {index} is {distance:.3} Å from the nearest atom (limit {limit:.3})")]
    AmbiguousSite { index: usize, distance: f64, limit: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
