use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes that do not fit the operation (odd sizes, mismatched inputs).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration that cannot be run, e.g. an empty negative set.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric parameter outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Pixel values outside the expected range.
    #[error("range error: {0}")]
    Range(String),

    /// Dataset content that does not match what was expected.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
