use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("definition text is empty")]
    EmptyDefinition,
    #[error("term `{0}` already exists in the knowledge store")]
    DuplicateTerm(String),
    #[error("term `{0}` is reserved and cannot be removed")]
    ReservedTerm(String),
    #[error("unknown term `{0}`")]
    UnknownTerm(String),
    #[error("invalid term `{0}`")]
    InvalidTerm(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("knowledge store is empty")]
    EmptyStore,
    #[error("{tags} tags do not fit into {slots} slots")]
    TooManyTags { tags: usize, slots: usize },
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("brute force assignment limited to K <= 9, got {0}")]
    TooLarge(usize),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("no masked positions to score")]
    EmptyMaskSet,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("sequence is empty")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,
    #[error("corpus needs at least 2 items, got {0}")]
    CorpusTooSmall(usize),
    #[error("item {0} has an empty reference set")]
    EmptyReferenceSet(usize),
    #[error("scene list is empty")]
    EmptySceneList,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
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

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
