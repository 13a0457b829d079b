use std::io;

use thiserror::Error;

pub type Result<T, E = PitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PitError {
    #[error("syntax error at column {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("invalid expression: {0}")]
    InvalidExpr(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout violation: {0}")]
    Layout(String),

    #[error("plan incompatible: {0}")]
    IncompatiblePlan(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported operator: {0}")]
    Unsupported(String),

    #[error("kernel registry: {0}")]
    Registry(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PitError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        PitError::Parse {
            line,
            message: message.into(),
        }
    }
}
