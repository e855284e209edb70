use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("degenerate CIF weights: sum of alpha is {0}")]
    DegenerateWeights(f64),
    #[error("speaker pool exhausted: need {needed} unused profiles, {available} available")]
    PoolExhausted { needed: usize, available: usize },
    #[error("malformed serialized stream: {0}")]
    MalformedStream(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
