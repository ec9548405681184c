use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VtoError {
    /// Caller handed us something that violates an operation's preconditions.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// NaN/Inf surfaced where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VtoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VtoError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code contract: 0 success, 2 usage, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            VtoError::Io { .. } => 3,
            VtoError::Numerical(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VtoError>;
