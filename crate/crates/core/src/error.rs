use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {}", path.display())]
    NotFound { path: PathBuf },

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint version: file has version {found}, this build reads version {expected}")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NotFound { .. } | Error::Format(_) | Error::IncompatibleVersion { .. } => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NumericFailure(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
