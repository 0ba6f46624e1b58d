use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown token {0:?}")]
    Vocab(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("batch of {got} samples is too small (need at least {need})")]
    BatchSize { got: usize, need: usize },

    #[error("cannot mine a negative: {0}")]
    NegativeMining(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("scene does not support subtask {subtask}: {reason}")]
    Capability { subtask: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("columns {a:?} and {b:?} share only {n} steps (need at least 3)")]
    InsufficientOverlap { a: String, b: String, n: usize },

    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("unknown subtask {0:?}")]
    UnknownSubtask(String),

    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing prerequisite artifact {path}: {reason}")]
    Dependency { path: PathBuf, reason: String },

    #[error("config hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(what: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            what,
            message: message.into(),
        }
    }
}
