use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("empty template '{0}' cannot be run through the recurrent aggregator")]
    EmptyTemplate(String),

    #[error("non-finite value encountered in {context} (coordinate {coordinate})")]
    NonFinite { context: String, coordinate: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("gradient check failed: max relative error {max_relative_error} at parameter {worst_parameter_index} (tolerance {tolerance})")]
    GradientCheck {
        max_relative_error: f64,
        worst_parameter_index: usize,
        tolerance: f64,
    },

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
