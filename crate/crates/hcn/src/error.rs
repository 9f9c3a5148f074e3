use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor rank/shape/dimension violations.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operator produced NaN or infinity, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The coding-matrix constraint set admits no solution at a column.
    #[error("infeasible code constraints at column {column}: {reason}")]
    Infeasible { column: usize, reason: String },

    /// Malformed input file, with location.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Configuration file problems (unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// Model archive corruption, truncation, or version mismatch.
    #[error("archive error: {0}")]
    Archive(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
