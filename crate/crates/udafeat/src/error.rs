use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors of the file formats and commands, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Core(#[from] udafeat_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

impl Error {
    pub fn exit_code(&self) -> i32 {
        use udafeat_core::Error as C;
        match self {
            Error::Core(C::NumericAbort { .. } | C::NonFinite(_)) => EXIT_NUMERIC,
            Error::Core(C::InvalidConfig(_)) | Error::Config(_) => EXIT_CONFIG,
            Error::Core(_) | Error::Mismatch(_) => EXIT_MISMATCH,
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}
