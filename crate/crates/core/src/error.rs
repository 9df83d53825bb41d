use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the manipulation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("press threshold must be positive, got {0}")]
    NonpositiveThreshold(f64),

    #[error("joint {index} = {value} rad outside limits [{lower}, {upper}]")]
    JointLimitViolation {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("target unreachable for {finger}: residual {residual:.4} mm")]
    Unreachable { finger: String, residual: f64 },

    #[error("stiffness matrix is not invertible")]
    SingularStiffness,

    #[error("unknown syringe size {0}")]
    UnknownSize(u32),

    #[error("trace is incomplete: {0}")]
    IncompleteTrace(String),

    #[error("expert starvation: size {size} produced {successes}/{wanted} successes in {attempts} attempts")]
    ExpertStarvation {
        size: u32,
        successes: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
