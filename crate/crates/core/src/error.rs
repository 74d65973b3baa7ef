use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid hook site: {0}")]
    HookSite(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("checksum mismatch in {path}: {detail}")]
    Checksum { path: PathBuf, detail: String },

    #[error("architecture mismatch: expected {expected}, found {found}")]
    Architecture { expected: String, found: String },

    #[error("corrupt file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("construction sanity probe failed: {0}")]
    Probe(String),

    #[error("external service error: {0}")]
    Service(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure came from the external scoring service rather than
    /// local data or configuration.
    pub fn is_external(&self) -> bool {
        matches!(self, Error::Service(_))
    }
}
