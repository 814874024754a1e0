use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("event {index} out of bounds: ({x}, {y}) on a {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("timestamps not monotone at record {index}")]
    NonMonotone { index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
