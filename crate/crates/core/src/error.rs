use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch of size {0} is too small for train-mode batch normalization (need >= 2)")]
    BatchTooSmall(usize),

    #[error("no batch-norm statistics slot for domain {0}")]
    UnknownDomain(String),

    #[error("label {label} has no {missing} in the batch")]
    MissingTripletPartner { label: usize, missing: &'static str },

    #[error("label {label} out of range for classifier with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("pseudo-label set is empty")]
    EmptyPseudoLabels,

    #[error("identity labels of this dataset are hidden")]
    LabelsHidden,

    #[error("only {available} distinct labels available, sampler needs {required}")]
    NotEnoughLabels { available: usize, required: usize },

    #[error("clustering collapsed: {clusters} usable clusters (need >= 2)")]
    ClusterCollapse { clusters: usize },

    #[error("query {query} has no valid gallery match")]
    NoValidMatch { query: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
