use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid document {doc_id}: {message}")]
    InvalidDocument { doc_id: String, message: String },

    #[error("image {image_id} has no similarity scores")]
    MissingScores { image_id: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt file at byte offset {offset}: {message}")]
    Corrupt { offset: u64, message: String },

    #[error("refusing to load: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFinite { step: usize, batch: usize },

    #[error("sequence overflow: {0}")]
    Overflow(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from bad input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
