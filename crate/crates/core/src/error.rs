use std::path::PathBuf;

/// Errors surfaced by model assembly, data ingestion and the run harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("trace capture was disabled for this forward pass")]
    TraceDisabled,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
