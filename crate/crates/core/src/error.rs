use std::path::PathBuf;

use thiserror::Error;

use crate::glyphkit::Rect;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {0:?} is not in the charset")]
    UnknownChar(char),

    #[error("block {block} bbox {bbox} cannot hold {chars} character cell(s)")]
    BlockTooSmall {
        block: usize,
        bbox: Rect,
        chars: usize,
    },

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("character pool is empty")]
    PoolEmpty,

    #[error("candidate groups need at least 2 images, got {0}")]
    GroupTooSmall(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("region {0} has zero area")]
    DegenerateRegion(Rect),

    #[error("annotation rect {rect} lies outside block {block} ({bbox})")]
    AnnotationOutOfBlock {
        block: usize,
        rect: Rect,
        bbox: Rect,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("objective {0} needs preference annotations but the dataset has none")]
    MissingAnnotations(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
