use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories for the feature-file codec. Each maps to its own CLI
/// exit code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (expected \"DAMSFEAT\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("payload CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("empty loss: {0}")]
    EmptyLoss(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    RawFormat(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::DegenerateBatch(_) | Error::DegenerateEmbedding(_) | Error::EmptyLoss(_) | Error::Data(_) => "data",
            Error::UndefinedMetric(_) => "metric",
            Error::NonFinite(_) => "non-finite",
            Error::Format { .. } | Error::RawFormat(_) | Error::Json(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
