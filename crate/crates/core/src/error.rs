use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("attention over an empty context")]
    EmptyContext,

    #[error("token set is empty")]
    EmptyTokenSet,

    #[error("token index {index} out of range for sequence length {len}")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid engine state: {0}")]
    State(String),

    #[error("block {block} out of range ({num_blocks} blocks)")]
    BlockOutOfRange { block: usize, num_blocks: usize },

    #[error("workload contains no blocks")]
    EmptyWorkload,

    #[error("no partial results for batch {batch} head {head}")]
    MissingPartials { batch: usize, head: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
