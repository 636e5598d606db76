//! Error type shared across the crate.

use crate::optimizer::PhaseTag;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector or matrix was passed where another dimension was expected.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A batch reference was empty or indexed out of range.
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    /// An argument violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss or parameter and was aborted.
    #[error("non-finite {what} at session {session}, iteration {iteration} ({phase})")]
    Diverged {
        what: &'static str,
        session: usize,
        iteration: usize,
        phase: PhaseTag,
    },

    /// A serialized dataset line could not be parsed.
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
