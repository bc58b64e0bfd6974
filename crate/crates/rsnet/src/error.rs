//! Crate-wide error type with a stable mapping to process exit codes.

use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, unknown keys, invalid flags, capacity limits.
    Config,
    /// Missing, malformed, or incompatible data files and checkpoints.
    Data,
    /// Numerical contract violations: shape mismatches, NaN/Inf, divergence.
    Numerical,
}

impl ErrorKind {
    /// Process exit code for this class. 0 is reserved for success.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {got} exceeds capacity {max}; raise `t_max` in the model config")]
    Capacity { got: usize, max: usize },

    #[error("numerical contract violated: {0}")]
    Numerical(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Capacity { .. } => ErrorKind::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => ErrorKind::Data,
            Error::Shape { .. } | Error::Numerical(_) | Error::NonFinite { .. } => {
                ErrorKind::Numerical
            }
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_nonzero() {
        let codes = [
            ErrorKind::Config.exit_code(),
            ErrorKind::Data.exit_code(),
            ErrorKind::Numerical.exit_code(),
        ];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, 0);
            for b in codes.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }
}
