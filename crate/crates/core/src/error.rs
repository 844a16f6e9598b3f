use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient audio: {0}")]
    InsufficientAudio(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("invalid container file: {0}")]
    Container(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
