use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward value came out NaN or infinite.
    #[error("numeric guard tripped in `{0}`: non-finite value")]
    NumericGuard(&'static str),

    /// API misuse, e.g. backward on a non-scalar or a second backward pass.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad caller-supplied data: token ids out of range, malformed records.
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (file is corrupted)")]
    Checksum,

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericGuard(_) => 2,
            Error::Io(_) => 3,
            _ => 1,
        }
    }
}
