use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("record {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },

    #[error("checkpoint is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        last_good: Option<PathBuf>,
    },

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

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by NaN/Inf rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }

    /// Process exit status for command-line use: 1 for bad arguments, 2 for
    /// unusable data or configuration, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Shape { .. } | Error::Index { .. } => 3,
            _ => 2,
        }
    }
}
