use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardRecord,

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
