use thiserror::Error;

/// Errors produced by the merge engine, encoder, and tooling.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was violated.
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Malformed schedule text; `column` is 1-based.
    #[error("schedule parse error at column {column}: {msg}")]
    Parse { column: usize, msg: String },

    /// The schedule cannot be executed for the given model geometry.
    #[error("infeasible schedule at layer {layer}: {msg}")]
    Infeasible { layer: usize, msg: String },

    /// A tensor container or report file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss, gradient or parameter.
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract { op, msg: msg.into() })
}
