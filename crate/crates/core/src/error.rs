use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file for role `{role}`: {path}")]
    MissingFile { role: String, path: PathBuf },

    #[error("bad header in {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("manifest error in {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has norm {norm}, expected 1 within {tol}")]
    NormViolation { row: usize, norm: f64, tol: f64 },

    #[error("column {col} has norm {norm}, expected 1 within {tol}")]
    ColumnNormViolation { col: usize, norm: f64, tol: f64 },

    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("factorization of group {group} failed: kernel matrix is not positive definite")]
    Factorization { group: usize },

    #[error("non-finite {what} at step {step}")]
    NonFiniteLoss { what: &'static str, step: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
