use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("incompatible architectures: `{0}` vs `{1}`")]
    Incompatible(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{what} at byte offset {offset}")]
    Format { offset: u64, what: String },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
