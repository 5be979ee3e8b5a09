use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed class map, class tree, annotation or manifest text.
    #[error("format error in {source_name}: {message}")]
    Format {
        source_name: String,
        message: String,
    },

    /// Inputs that parse but violate a data contract (unknown class, order mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch ids: {batch_ids:?})")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error("checkpoint class tree fingerprint {found} does not match dataset fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input data rather than configuration or I/O.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::FingerprintMismatch { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
