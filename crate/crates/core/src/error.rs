use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("entry {value} at ({row}, {col}) is not ±1")]
    NotBinary { row: usize, col: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("cache is stale: recorded version {cached}, parameters at version {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
