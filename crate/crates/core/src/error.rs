use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward already ran on this graph; build a new graph for the next pass")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("schema error at `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config mismatch at `{field}`: checkpoint has {found}, config expects {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("frozen parameter `{0}` was modified")]
    FrozenMutated(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
