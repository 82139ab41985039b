use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value at iteration {iteration}, node {node}")]
    Numeric { iteration: usize, node: usize },

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
