//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or channel-count disagreement between a config and its inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or numerically invalid state.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad argument to an otherwise valid operation (empty batch, zero-norm
    /// embedding, invalid simplex row, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Manifest or report text that does not parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input that parses but violates a declared contract (split counts,
    /// missing files, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Operation invoked in the wrong lifecycle state (e.g. stage-2 step
    /// before the encoder is frozen).
    #[error("state error: {0}")]
    State(String),

    /// Checkpoint container that cannot be loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Image file that cannot be decoded.
    #[error("ingestion error: {path}: {message}")]
    Ingestion { path: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than a failure at
    /// runtime. The CLI maps these to exit code 1, everything else to 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Argument(_)
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::State(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
