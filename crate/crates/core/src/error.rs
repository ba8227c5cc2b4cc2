use hso_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("context overflow: {needed} positions requested, maximum is {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {0} in window; update aborted")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("insufficient example pool: {0}")]
    InsufficientPool(String),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
