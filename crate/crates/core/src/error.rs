use std::path::PathBuf;

/// Errors produced by the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid depth {0}: depth must be strictly positive")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
