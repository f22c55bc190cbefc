use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside the allowed range [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (valid: {lo}..={hi})")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("singularity: {0}")]
    Singular(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible {field}: expected {expected}, found {found}")]
    Compat {
        field: String,
        expected: String,
        found: String,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Checks that `v` has length `expected`.
pub(crate) fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Shape {
            context,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Returns the first non-finite entry of `v` as an error.
pub(crate) fn check_finite(context: impl Into<String>, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.into(),
            index,
        }),
        None => Ok(()),
    }
}
