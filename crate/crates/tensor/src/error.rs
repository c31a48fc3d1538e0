use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}
