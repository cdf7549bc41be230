use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular scale: S[{index}] = {value:e} is below the inversion threshold")]
    SingularScale { index: usize, value: f64 },

    #[error("environment {0} is empty")]
    EmptyEnvironment(usize),

    #[error("degenerate penalty: {0}")]
    DegeneratePenalty(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("rejection sampler stuck: {0}")]
    StuckSampler(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
