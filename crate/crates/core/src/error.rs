use thiserror::Error;

/// Errors raised across the simulator and analysis layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input value violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// A run configuration is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked in a state where it has no meaning.
    #[error("logic error: {0}")]
    Logic(String),
    /// A calibration produced a value outside the permitted regime.
    #[error("calibration error: {0}")]
    Calibration(String),
    /// A serialized input could not be parsed.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
