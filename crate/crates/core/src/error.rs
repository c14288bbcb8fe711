//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid header field `{field}`: {message}")]
    InvalidHeader {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("{path}: payload length {actual} bytes, expected {expected} (shape {shape:?}, {dtype})")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
        shape: [usize; 3],
        dtype: &'static str,
    },

    #[error("volume invariant violated: {0}")]
    InvalidVolume(String),

    #[error("manifest: duplicate patient_id `{0}`")]
    DuplicatePatient(String),

    #[error("manifest: {0}")]
    InvalidManifest(String),

    #[error("{field_path}: {message}")]
    Validation { field_path: String, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask grid does not match volume grid: {0}")]
    GridMismatch(String),

    #[error("mask union is empty")]
    EmptyMask,

    #[error("class {0} absent from labels; balanced accuracy undefined")]
    MissingClass(u8),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field_path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field_path: field_path.into(),
            message: message.into(),
        }
    }

    /// CLI process exit code: 1 config/validation, 2 I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}
