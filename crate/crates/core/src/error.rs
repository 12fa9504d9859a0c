use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dimension} is {actual}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        dimension: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: output size would be {height}x{width}")]
    EmptyOutput {
        op: &'static str,
        height: i64,
        width: i64,
    },

    #[error("data length {actual} does not match shape volume {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer or parameter `{0}`")]
    UnknownParameter(String),

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("objective is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("missing ground truth for: {}", .0.join(", "))]
    MissingTruth(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
