//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: expected {expected}, got {got}")]
    DtypeMismatch { expected: String, got: String },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("index {index} out of range for table with {extent} rows")]
    IndexOutOfRange { index: i64, extent: usize },
    #[error("invalid range: low ({low}) must be strictly below high ({high})")]
    InvalidRange { low: f64, high: f64 },
    #[error("invalid dropout probability {0}: must be in [0, 1)")]
    InvalidProbability(f64),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("missing input: `{0}` has no stored value and no feed entry")]
    MissingInput(String),
    #[error("arity mismatch for `{layer}`: expected {expected} inputs, got {got}")]
    ArityMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("cycle detected: {0}")]
    CycleDetected(String),
    #[error("trace reached source `{0}` that is not among the declared inputs")]
    UndeclaredInput(String),
    #[error("declared input `{0}` was not reached by the trace")]
    UnreachableDeclaredInput(String),
    #[error("module input `{0}` is not on any path to the output")]
    DisconnectedInput(String),
    #[error("module trace reached `{0}`, which is not listed among the module inputs")]
    UnreachableDependency(String),
    #[error("feed arity mismatch: plan takes {expected} inputs, got {got}")]
    FeedArityMismatch { expected: usize, got: usize },
    #[error("feed shape mismatch for `{input}`: {detail}")]
    FeedShapeMismatch { input: String, detail: String },
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("loss node `{0}` does not evaluate to a scalar")]
    NonScalarLoss(String),
    #[error("node `{0}` is not an output of the graph")]
    NotInGraph(String),
    #[error("non-finite loss at step {0}; state left unchanged")]
    NonFiniteLoss(u64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown layer kind `{0}`")]
    UnknownKind(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
