use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Load failures for the binary formats
/// get their own variants so callers can tell a corrupt header from a bad payload.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: header declares {declared}, payload implies {found}")]
    DimensionMismatch { declared: usize, found: usize },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("bank contains no items")]
    EmptyBank,

    #[error("non-finite value in item {item}")]
    NonFinite { item: usize },

    #[error("zero-norm vector in item {item}")]
    ZeroVector { item: usize },

    #[error("vector dimension {found} does not match expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("class id {0} already present")]
    ClassCollision(u32),

    #[error("class id {0} is unknown")]
    UnknownClass(u32),

    #[error("class {id} has conflicting names {first:?} and {second:?}")]
    ConflictingClassName { id: u32, first: String, second: String },

    #[error("class {0} has an empty name")]
    EmptyClassName(u32),

    #[error("class sets differ between banks")]
    ClassSetMismatch,

    #[error("class {0} has no items")]
    EmptyClass(u32),

    #[error("prototypes for the {0} branch are missing")]
    MissingPrototypes(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
