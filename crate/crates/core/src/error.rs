use thiserror::Error;

use crate::container::ContainerError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("module {index}: {reason}")]
    InvalidModule { index: usize, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("objective is not scalar: module {module} produces {len} values")]
    NonScalarObjective { module: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("module {0} not found")]
    MissingModule(usize),

    #[error("covariance for class {class} could not be regularized to positive definite")]
    NotPositiveDefinite { class: usize },

    #[error("branch {0} has no modules after filtering")]
    EmptyBranch(usize),

    #[error("threshold grid has {cells} cells (limit {limit}); use a coarser resolution")]
    GridTooLarge { cells: u128, limit: u128 },

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
