use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A file did not match its expected on-disk schema.
    #[error("format error in {path} at line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// Non-finite values appeared in features, losses, or updates.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Without-replacement synthesis ran out of examples for a client.
    #[error("partition infeasible while filling client {client}: {msg}")]
    Infeasible { client: usize, msg: String },

    /// Every class carrying probability mass has been exhausted.
    #[error("degenerate renormalization: exhausted classes cover the whole support")]
    DegenerateRenormalization,

    /// Violation of the round protocol, e.g. aggregating zero updates.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An internal invariant did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Experiment configuration could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub fn param(msg: impl Into<String>) -> Self {
        FedError::Param(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        FedError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        FedError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, FedError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
