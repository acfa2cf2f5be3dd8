use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Each variant maps to a stable
/// machine-readable code (see [`Error::code`]) that the CLI emits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate expert id {0}")]
    DuplicateExpert(usize),

    #[error("mismatched element sets between orders")]
    MismatchedOrders,

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("numeric overflow at step {step}: {detail}")]
    NumericOverflow { step: usize, detail: String },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("experiment failed: {0}")]
    ExperimentFailed(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad magic in {}", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported dtype {dtype} in {}", .path.display())]
    UnsupportedDtype { path: PathBuf, dtype: u8 },

    #[error("payload length mismatch in {}: expected {expected} bytes, found {actual}", .path.display())]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {}", .0.display())]
    NonFinite(PathBuf),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Empty(_) => "empty_input",
            Error::DuplicateExpert(_) => "duplicate_expert",
            Error::MismatchedOrders => "mismatched_orders",
            Error::UndefinedStatistic(_) => "undefined_statistic",
            Error::Infeasible(_) => "infeasible_budget",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::LinearAlgebra(_) => "linear_algebra",
            Error::ExperimentFailed(_) => "experiment_failed",
            Error::MissingFile(_) => "missing_file",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedDtype { .. } => "unsupported_dtype",
            Error::PayloadLength { .. } => "payload_length_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Manifest(_) => "malformed_manifest",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
