//! Crate-wide error type.
//!
//! Variants are grouped by how a front end should react: `Usage` for bad
//! invocations or missing files, the validation family (`Shape`, `Config`,
//! `Data`, `Format`, `Contract`) for inputs that parse but violate a
//! documented requirement, and `NonFinite` for numeric failure during
//! training or evaluation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed invocation: unknown flag values, unreadable paths, missing
    /// inputs.
    #[error("usage error: {0}")]
    Usage(String),

    /// Tensor shape mismatch. Message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (failed cross-field validation).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data contents (bad labels, empty splits, out-of-range values).
    #[error("data error: {0}")]
    Data(String),

    /// Corrupt or incompatible serialized artifact. Message includes the byte
    /// offset where decoding failed when one is available.
    #[error("format error: {0}")]
    Format(String),

    /// An API contract was violated (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or infinity surfaced where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for front ends: 2 usage, 3 validation, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Io { .. } => 2,
            Error::Shape(_)
            | Error::Config(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Contract(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
