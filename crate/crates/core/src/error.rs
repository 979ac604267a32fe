use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input: plan, config, table or argument that violates a precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("plan validation error: cell ({continent}, {gender}) has {found} of {expected} names")]
    NameCell {
        continent: String,
        gender: String,
        found: usize,
        expected: usize,
    },

    #[error("backend unavailable after {completed} completed records: {reason}")]
    BackendUnavailable { completed: u64, reason: String },

    #[error("protocol error for seq {first}..{last}: {reason}")]
    Protocol { first: u64, last: u64, reason: String },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("{path}:{line}: {reason}")]
    Load {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("undefined distribution: {0}")]
    UndefinedDistribution(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("missing prerequisite artifact {artifact}; run `{stage}` first")]
    MissingPrerequisite { stage: String, artifact: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code: 2 validation, 3 backend, 4 data integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BackendUnavailable { .. } | Error::Protocol { .. } => 3,
            Error::Integrity(_)
            | Error::Load { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 4,
            _ => 2,
        }
    }
}
