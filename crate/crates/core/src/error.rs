use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Re-tags a divergence raised by an inner loop with the outer iteration
    /// that was running when it happened.
    pub fn at_outer_iteration(self, k: usize) -> Self {
        match self {
            Error::Divergence { iteration, detail } => Error::Divergence {
                iteration: k,
                detail: format!("{detail} (inner step {iteration})"),
            },
            other => other,
        }
    }
}
