use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The matrix handed to the special Procrustes projection has rank <= 1,
    /// so the nearest rotation is not unique.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("grid level {0} out of range (expected 0..=4)")]
    LevelOutOfRange(u32),

    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty list")]
    EmptyList,

    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("missing parent value `{parent}` for node `{node}`")]
    MissingParent { node: String, parent: String },

    #[error("incomplete assignment: {0}")]
    IncompleteAssignment(String),

    #[error("degenerate point set: {0}")]
    DegeneratePointSet(String),

    #[error("could not place people after {0} attempts")]
    PlacementFailure(usize),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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
