//! Experiment runner: sweeps policies and penalty factors over a network and
//! writes plot-ready delimited files.

pub mod boundaries;
pub mod config;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ridematch::Error> for CliError {
    fn from(e: ridematch::Error) -> Self {
        use ridematch::Error as E;
        match e {
            E::Numeric(m) => CliError::Numeric(m),
            E::Invariant(m) => CliError::Invariant(m),
            E::Usage(m) => CliError::Usage(m),
            E::Io(e) => CliError::Io(e),
            other => CliError::Config(other.to_string()),
        }
    }
}
