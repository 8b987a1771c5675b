use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient requested for a non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` is not bound to this computation record")]
    Detached(String),

    #[error("parameter sets are misaligned: {0}")]
    Misaligned(String),

    #[error("no output head for task {0}")]
    MissingHead(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {kind}")]
    Parse {
        path: PathBuf,
        line: usize,
        kind: ParseErrorKind,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("task {task}, step {step}: {source}")]
    Step {
        task: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    Ragged { expected: usize, found: usize },
    NonNumeric { column: usize, cell: String },
    BadLabel { cell: String },
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::Empty => write!(f, "file contains no data rows"),
            ParseErrorKind::Ragged { expected, found } => {
                write!(f, "ragged row: expected {expected} columns, found {found}")
            }
            ParseErrorKind::NonNumeric { column, cell } => {
                write!(f, "non-numeric cell {cell:?} in column {column}")
            }
            ParseErrorKind::BadLabel { cell } => {
                write!(f, "label {cell:?} is not a non-negative integer")
            }
        }
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, task: usize, step: usize) -> Self {
        Error::Step {
            task,
            step,
            source: Box::new(self),
        }
    }
}
