use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Configuration is invalid or cannot be satisfied by the data.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Synthetic generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A non-finite value appeared where finite values are required.
    #[error("numerical failure in `{name}`: {message}")]
    Numerical { name: String, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated blob {file}: expected {expected} bytes, found {found}")]
    Truncated {
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch in {file}: manifest {expected:08x}, computed {found:08x}")]
    Checksum {
        file: String,
        expected: u32,
        found: u32,
    },

    /// A stored tensor does not have the shape the model expects.
    #[error("shape mismatch for tensor `{name}`: stored {stored:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Error::Usage(message.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by on-disk data rather than by configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Version { .. }
                | Error::Truncated { .. }
                | Error::Checksum { .. }
                | Error::TensorShape { .. }
                | Error::Manifest { .. }
                | Error::Io { .. }
        )
    }
}
