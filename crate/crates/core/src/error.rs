use svt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid model, SPM or input configuration; detected at build time.
    #[error("config error: {0}")]
    Config(String),
    /// A module precondition that another module is responsible for upholding.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}
