use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the unfolding library.
#[derive(Debug, Error)]
pub enum UnfoldError {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target point {index} at ({x:.3}, {y:.3}, {z:.3}) mm lies outside the grid")]
    TargetOutsideGrid { index: usize, x: f64, y: f64, z: f64 },

    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("mask volume is not binary")]
    NonBinaryMask,

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("target not covered: no pixel lies within the relevant radius")]
    TargetNotCovered,

    #[error("non-finite parameter in layer {layer}")]
    NonFiniteParameter { layer: usize },

    #[error(
        "non-finite loss at epoch {epoch} (target {target}, distortion {distortion}, image {image}, jacobian {jacobian}); max |grad| = {max_grad}"
    )]
    NonFiniteLoss {
        epoch: usize,
        target: f64,
        distortion: f64,
        image: f64,
        jacobian: f64,
        max_grad: f64,
    },

    #[error("phantom curve leaves the volume: {0}")]
    CurveOutsideVolume(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl UnfoldError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UnfoldError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        UnfoldError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical pipeline rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            UnfoldError::NonFiniteLoss { .. } | UnfoldError::NonFiniteParameter { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, UnfoldError>;
