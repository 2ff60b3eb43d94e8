//! Error type shared by every module in the engine.

use thiserror::Error;

/// Errors produced by tensor kernels, network assembly, I/O and training.
#[derive(Error, Debug)]
pub enum Error {
    /// A tensor argument had the wrong extent along one dimension.
    #[error("shape mismatch in {context}: dimension {dimension} expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        dimension: &'static str,
        expected: usize,
        found: usize,
    },

    /// An operation produced or received an empty/invalid geometry.
    #[error("invalid geometry in {context}: {message}")]
    InvalidGeometry {
        context: &'static str,
        message: String,
    },

    /// A configuration field violated an invariant.
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    /// Non-finite value detected during computation.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    /// Weight or tensor file did not match what the model expects.
    #[error("weight file mismatch: expected {expected}, found {found}")]
    WeightMismatch { expected: String, found: String },

    /// Malformed binary or text file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
