use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameterization error: {0}")]
    Parameter(String),
    #[error("data file {path}: {msg}")]
    Data { path: String, msg: String },
    #[error("state error: {0}")]
    State(String),
    #[error("action error: {0}")]
    Action(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
