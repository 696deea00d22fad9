use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::IdxError;
use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("an ETF needs at least 2 classes, got {classes}")]
    TooFewClasses { classes: usize },
    #[error("feature dimension {dim} is smaller than class count {classes}")]
    DimensionBelowClasses { dim: usize, classes: usize },
    #[error("duplicate class label {label}")]
    DuplicateLabel { label: usize },
    #[error("class label {label} is not part of the ETF target")]
    UnknownLabel { label: usize },
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{which} is not unit norm (measured {norm})")]
    NonUnitInput { which: &'static str, norm: f64 },
    #[error("non-finite values at layer {layer}")]
    NonFiniteLayer { layer: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("distillation weight is positive but no previous model was supplied")]
    MissingPrevModel,
    #[error("no ETF target available yet")]
    MissingEtf,
    #[error("first task requires training (epochs must be positive)")]
    NoTraining,
    #[error("class {label} was already seen in an earlier task")]
    ClassOverlap { label: usize },
    #[error("class {label} has no samples")]
    EmptyClass { label: usize },
    #[error("unknown task id {task}")]
    UnknownTask { task: usize },
    #[error("accuracy matrix row {row} is incomplete")]
    IncompleteRow { row: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
