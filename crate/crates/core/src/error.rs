use std::path::PathBuf;

/// Crate-wide error type.
///
/// Validation errors (bad shapes, configs, file formats) map to CLI exit
/// code 1; runtime failures (I/O, non-finite values mid-run) map to exit
/// code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    #[error("{op}: domain error: {details}")]
    Domain { op: &'static str, details: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward called on a stale tape; run a new forward pass first")]
    StaleTape,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {details}")]
    Format { path: PathBuf, details: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code associated with this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::Degenerate(_)
            | Error::Missing(_)
            | Error::NonScalarLoss(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
