use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} at ({row}, {level}) is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        row: usize,
        level: usize,
        token: u32,
        vocab: usize,
    },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("conditioning is missing a stream with role {0}")]
    MissingRole(&'static str),
    #[error("unknown conditioning stream `{0}`")]
    UnknownStream(String),
    #[error("backward called without a cached forward pass")]
    NoCache,
    #[error("step mismatch: state at step {state}, schedule has {steps} steps")]
    StepMismatch { state: usize, steps: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape { what, expected, got }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
