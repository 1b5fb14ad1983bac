use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// Each variant maps to a stable machine-readable code (see [`Error::code`]),
/// which the CLI prints as `code: message`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{0}")]
    UnsupportedFormat(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{0}")]
    DatasetLayout(String),
    #[error("class '{class}' has {available} sample(s); oversampling needs at least 2")]
    InsufficientNeighbors { class: String, available: usize },
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    CheckpointFormat(String),
    #[error("{0}")]
    ArchiveFormat(String),
    #[error("{0}")]
    UndefinedCurve(String),
    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io_error",
            Error::Decode { .. } => "decode_error",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DatasetLayout(_) => "dataset_layout",
            Error::InsufficientNeighbors { .. } => "insufficient_neighbors",
            Error::Shape(_) => "shape_error",
            Error::State(_) => "state_error",
            Error::CheckpointFormat(_) => "checkpoint_format",
            Error::ArchiveFormat(_) => "archive_format",
            Error::UndefinedCurve(_) => "undefined_curve",
            Error::Config(_) => "config_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
