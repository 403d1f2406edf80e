use svt_core::CoreError;
use svt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid experiment, dataset, model or sweep description.
    #[error("config error: {0}")]
    Config(String),
    /// A non-finite loss or gradient; names the first offending tape node.
    #[error("numerical abort at step {step}: {detail}")]
    Numerical { step: usize, detail: String },
    #[error("argument error: {0}")]
    Argument(String),
    /// An exported record broke a law the SPM guarantees.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Core(CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Core(CoreError::Config(_)) => 2,
            HarnessError::Numerical { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => HarnessError::Config(m),
            e => HarnessError::Core(e),
        }
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Core(CoreError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
