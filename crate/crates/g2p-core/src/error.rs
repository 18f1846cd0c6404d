//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants split along the operator-facing exit-code boundary: [`Error::Io`]
/// is an exit-code-2 failure (the file system let us down), everything else is
/// an exit-code-1 failure (the inputs or parameters are wrong).
#[derive(Debug, Error)]
pub enum Error {
    /// A value or parameter violates a precondition. `field` names the
    /// offending input.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// A container is missing required properties.
    #[error("{path}: missing required properties: {}", missing.join(", "))]
    MissingProperties { path: PathBuf, missing: Vec<String> },

    /// A file failed structural parsing.
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// A record holds a non-finite value in a required field. In lenient mode
    /// the record is dropped instead of raising this.
    #[error("{path}: record {index}: non-finite value in field `{field}`")]
    BadRecord {
        path: PathBuf,
        index: usize,
        field: String,
    },

    /// Underlying file-system failure, with the path that triggered it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code this error maps to: 2 for I/O, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

/// Rejects non-finite scalar inputs with an error naming the field.
pub fn ensure_finite(field: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("non-finite value {value}")))
    }
}

/// Rejects any non-finite component of a vector-like input.
pub fn ensure_finite_slice(field: &str, values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::validation(
                field,
                format!("non-finite component {i}: {v}"),
            ));
        }
    }
    Ok(())
}
