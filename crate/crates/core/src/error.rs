use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty language set")]
    EmptyLanguages,
    #[error("duplicate language code: {0}")]
    DuplicateLanguage(String),
    #[error("unknown language code: {0}")]
    UnknownLanguage(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("gradient tape already consumed by backward()")]
    TapeConsumed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
