//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative numerical method failed to converge or produced a
    /// degenerate result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The similarity graph has an isolated vertex, so the normalized
    /// Laplacian is undefined.
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    /// A spectral-embedding row collapsed to zero and cannot be normalized.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// A data file failed to parse. `line` is 1-based and includes the
    /// header.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record references an entity that does not exist.
    #[error("referential error: {0}")]
    Referential(String),

    /// The experiment configuration is invalid; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Prefixes the message with where the failure happened (round, cohort,
    /// client), keeping the variant.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            Error::DegenerateGraph(m) => Error::DegenerateGraph(format!("{ctx}: {m}")),
            Error::DegenerateEmbedding(m) => Error::DegenerateEmbedding(format!("{ctx}: {m}")),
            Error::Referential(m) => Error::Referential(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{ctx}: {msg}"),
            },
            other => other,
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
