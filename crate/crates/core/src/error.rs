use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Distinct failure kinds when decoding the on-disk formats.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported version `{0}`")]
    UnsupportedVersion(String),
    #[error("payload is {found} bytes, not a whole number of {element_size}-byte elements")]
    ByteCount { found: usize, element_size: usize },
    #[error("header declares {expected} elements but payload holds {found}")]
    ShapeMismatch { expected: usize, found: usize },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatError) -> Self {
        Error::Format { path: path.into(), kind }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
