use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid orientation code {code:?}: {reason} (axis letter {letter:?} at position {position})")]
    Orientation {
        code: String,
        letter: char,
        position: usize,
        reason: &'static str,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: image {image} vs label {label}")]
    GeometryMismatch { image: String, label: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid label value {value} (allowed: {allowed})")]
    Label { value: i64, allowed: String },

    #[error("linear interpolation is not allowed for label volumes")]
    LabelInterpolation,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("NIfTI error in {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("container error: {0}")]
    Container(String),

    #[error("checkpoint tensor {name}: {reason}")]
    Checkpoint { name: String, reason: String },

    #[error("non-finite loss {loss} at epoch {epoch}, batch from {provenance}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        provenance: String,
    },

    #[error("missing stage-1 predictions for folds {folds:?}")]
    MissingStageOne { folds: Vec<usize> },

    #[error("{violations} tumor voxels outside the organ mask in cases {cases:?}")]
    Containment { violations: usize, cases: Vec<String> },

    #[error("{0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
