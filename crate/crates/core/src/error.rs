use thiserror::Error;

use crate::phe::PheError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Phe(#[from] PheError),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: &'static str, expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error in {path}: field `{field}`: {message}")]
    Config { path: String, field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("protocol fault: {0}")]
    Protocol(String),
    #[error("stale iteration: expected {expected}, message carries {got}")]
    StaleIteration { expected: u64, got: u64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { context, expected, got }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures of the numeric or protocol kind, as opposed to bad
    /// input or configuration.
    pub fn is_numeric_or_protocol(&self) -> bool {
        matches!(
            self,
            Error::Phe(_) | Error::NonFinite(_) | Error::Protocol(_) | Error::StaleIteration { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
