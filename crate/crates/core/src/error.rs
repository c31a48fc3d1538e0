use bridgepress_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("unsupported container version {found} (reader supports ≤ {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Configuration-class errors (bad flags, bad config values).
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Configuration(_) | Error::Tensor(TensorError::Configuration(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Configuration(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn dimension<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
