use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Container-format failures. Each variant maps to a stable numeric code so
/// callers (and the CLI exit status) can tell them apart.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes, expected MFWT0001")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: payload holds {actual} bytes, header declares {expected}")]
    PayloadLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: shape {shape:?} does not match {nbytes} payload bytes")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        nbytes: usize,
    },
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic => 10,
            FormatError::MalformedHeader(_) => 11,
            FormatError::PayloadLength { .. } => 12,
            FormatError::UnsupportedDtype { .. } => 13,
            FormatError::ShapeMismatch { .. } => 14,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("incompatible weight sets at tensor `{tensor}`: {reason}")]
    Incompatible { tensor: String, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid permutation: {0}")]
    Permutation(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("unknown foundation `{0}`")]
    UnknownFoundation(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn incompatible(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Incompatible {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
