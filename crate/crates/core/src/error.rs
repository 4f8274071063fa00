use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{op}: value {value} outside the numeric domain")]
    Domain { op: &'static str, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid cluster head index {index} (have {heads} heads)")]
    InvalidHead { index: usize, heads: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("task {task}, epoch {epoch}, batch {batch}: {source}")]
    Phase {
        task: usize,
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
