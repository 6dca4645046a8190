use thiserror::Error;

use shieldrl_core::env::EnvError;
use shieldrl_core::train::TrainError;

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad flags, config or formula.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            _ => 2,
        }
    }
}

impl From<EnvError> for AppError {
    fn from(e: EnvError) -> Self {
        AppError::Usage(format!("environment spec: {e}"))
    }
}
