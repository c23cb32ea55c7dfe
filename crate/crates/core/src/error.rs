use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("wav format error in {path}: {field} is {found}, expected {expected}")]
    WavFormat {
        path: PathBuf,
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("codebook error: {0}")]
    Codebook(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// I/O failure tagged with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
