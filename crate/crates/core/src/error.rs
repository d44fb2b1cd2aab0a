use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the retrieval library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: field `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("codebook training error: {0}")]
    Training(String),
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("corrupt index {path}: {detail}")]
    CorruptIndex { path: PathBuf, detail: String },
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u16,
        found: u16,
    },
    #[error("unknown query id `{0}`")]
    UnknownQuery(String),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::ModeMismatch(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Dimension { .. }
            | Error::Validation(_)
            | Error::CorruptIndex { .. }
            | Error::Version { .. }
            | Error::UnknownQuery(_)
            | Error::Training(_) => ErrorClass::Data,
        }
    }
}
