//! Crate-wide error type.

/// Errors surfaced by configuration, I/O, and contract violations.
///
/// Hot-path operations (sampling, verification, retrieval) are total by
/// design and do not return `Result`; errors here come from setup, file
/// parsing, and cross-step consistency checks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prompt {0} has no rank assignment")]
    UnassignedPrompt(u64),

    #[error("stale draft pools: generated for step {built}, used at step {used}")]
    StalePools { built: usize, used: usize },

    #[error("residual distribution undefined: token {0} holds all probability mass")]
    ResidualUnitMass(u32),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
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
