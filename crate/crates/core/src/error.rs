use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: expected 4 fields `user item behavior timestamp`")]
    MalformedLine { line: usize },

    #[error("line {line}: unknown behavior `{label}`")]
    UnknownBehavior { label: String, line: usize },

    #[error("no record carries the target behavior `{0}`")]
    EmptyTargetBehavior(String),

    #[error("requested {requested} cold-start users but only {available} users have a test item")]
    NotEnoughTestUsers { requested: usize, available: usize },

    #[error("invalid dropout rate {0}: must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("behavior {behavior} has no negatives left for user {user}")]
    NoNegativesAvailable { user: usize, behavior: usize },

    #[error("oracle size limit exceeded: {size} > {limit}")]
    SizeLimitExceeded { size: usize, limit: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed {kind} file at line {line}: {reason}")]
    Format {
        kind: &'static str,
        line: usize,
        reason: String,
    },

    #[error("model does not match dataset: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(kind: &'static str, line: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            line,
            reason: reason.into(),
        }
    }
}
