//! Error types shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error for instance {id}: {msg}")]
    Validation { id: String, msg: String },

    #[error("benchmark build error: {0}")]
    Build(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("memory integrity error: {0}")]
    MemoryIntegrity(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach stage context while propagating trainer errors.
    pub fn with_stage(self, stage: usize) -> Error {
        Error::State(format!("stage {stage}: {self}"))
    }
}
