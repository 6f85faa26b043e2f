//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error. Variants are grouped so callers (notably the CLI) can map
/// them onto coarse failure classes: bad configuration, bad input data /
/// file-format trouble, I/O, or a numerical abort during training.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a precondition (bad token id, empty corpus, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file exists but its contents do not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Training produced a non-finite loss; carries enough context to
    /// reproduce the offending step.
    #[error("non-finite loss at step {step} (batch digest {batch_digest})")]
    NonFinite { step: u64, batch_digest: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand constructors; keep call sites terse.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
