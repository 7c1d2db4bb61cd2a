use crate::tensor::TensorError;

/// Error categories map to distinct process exit codes (see the CLI).
#[derive(Debug, thiserror::Error)]
pub enum RespelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl RespelError {
    /// 2 = config, 3 = i/o, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            RespelError::Config(_) => 2,
            RespelError::Io(_) | RespelError::Checkpoint(_) => 3,
            RespelError::Tensor(_) | RespelError::Numeric(_) => 4,
        }
    }
}
