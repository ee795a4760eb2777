use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong in the library. Frame, window and column
/// indices in messages are zero-based.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at frame {frame}, column {column} (byte offset {offset})")]
    NonFinite {
        frame: usize,
        column: usize,
        offset: u64,
    },

    #[error("invalid {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vector {index} is not unit norm (norm {norm})")]
    NotUnitNorm { index: usize, norm: f64 },

    #[error("degenerate embedding{}: pre-normalization norm {norm:e}", span_suffix(.span))]
    DegenerateEmbedding {
        norm: f64,
        span: Option<(usize, usize)>,
    },

    #[error("stream too short: {0}")]
    StreamTooShort(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite {what} at step {step} (batch identities {identities:?})")]
    NonFiniteTraining {
        what: String,
        step: usize,
        identities: Vec<String>,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn span_suffix(span: &Option<(usize, usize)>) -> String {
    match span {
        Some((a, b)) => format!(" in window [{a}, {b})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 1 check failure, 2 config or input
    /// error, 3 data precondition failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::SizeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::InvalidConfig { .. }
            | Error::Csv { .. } => 2,
            Error::Shape(_)
            | Error::NotUnitNorm { .. }
            | Error::DegenerateEmbedding { .. }
            | Error::StreamTooShort(_)
            | Error::InsufficientData(_)
            | Error::NonFiniteTraining { .. } => 3,
        }
    }
}
