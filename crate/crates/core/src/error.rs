use mafea_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MafeaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MafeaError {
    /// Process exit code for command-line use.
    pub fn exit_code(&self) -> i32 {
        match self {
            MafeaError::Config(_) => 2,
            MafeaError::Data(_) | MafeaError::Io(_) | MafeaError::Json(_) => 3,
            MafeaError::Numeric(_) => 4,
            MafeaError::Tensor(e) => match e {
                TensorError::NonFinite { .. } => 4,
                TensorError::Format(_) | TensorError::Io(_) => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T, E = MafeaError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> MafeaError {
    MafeaError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> MafeaError {
    MafeaError::Data(msg.into())
}
