//! Crate-wide error type.
//!
//! Every fallible public entry point returns [`Error`]. Variants are grouped by
//! failure class rather than by module so that callers (notably the CLI) can
//! map them onto exit codes without string matching.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for model construction, configuration, and solving.
#[derive(Debug, Error)]
pub enum Error {
    /// A model, rule, or problem was constructed with inconsistent or
    /// out-of-range arguments. The message names the offending field.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A configuration file failed to parse or validate. The message carries
    /// the field path and, for parse errors, line/column information.
    #[error("configuration error: {0}")]
    Config(String),

    /// A simulation or solve produced non-finite values or an exploding
    /// trajectory that no step-size control can recover from.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// An input file was missing or unreadable.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A solution or data file had an unexpected format.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Shorthand for [`Error::Invalid`] with a formatted message.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Shorthand for [`Error::Config`] with a formatted message.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
