use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{op} requires a symmetric matrix: |a[{i}][{j}] - a[{j}][{i}]| = {delta:.3e} exceeds tolerance")]
    NotSymmetric {
        op: &'static str,
        i: usize,
        j: usize,
        delta: f64,
    },

    #[error("non-finite value at row {row}, col {col} in {context}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for input/validation problems,
    /// 3 for numeric failures (usage errors are mapped to 1 by the parser).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
