use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the geometric stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point lies behind the camera (depth {depth})")]
    Cheirality { depth: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("threshold order violated: eps_ba ({eps_ba}) must exceed eps_dlt ({eps_dlt})")]
    ThresholdOrder { eps_ba: f64, eps_dlt: f64 },
    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),
    #[error("non-finite cost encountered at iteration {0}")]
    NonFiniteCost(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient inliers: ratio {ratio:.4} below required {required:.4}")]
    InsufficientInliers { ratio: f64, required: f64 },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("point budget cannot be met: {0}")]
    BudgetUnsatisfiable(String),
    #[error("alignment failed: {0}")]
    AlignmentFailed(Box<GeomError>),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Errors raised while reading or writing the on-disk formats.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
