use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: png decode failed: {message}")]
    Png { path: PathBuf, message: String },
    #[error("missing input: {0}")]
    Missing(PathBuf),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    Version(u8),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("entropy stream exhausted")]
    Exhausted,
    #[error("symbol {0} outside the coder alphabet")]
    Alphabet(i64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error("non-finite loss in phase {phase} at step {step}")]
    Diverged { phase: String, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
