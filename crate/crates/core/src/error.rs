use std::path::PathBuf;

/// Errors produced anywhere in the matching and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("degenerate motion: translation norm {norm:e} is too small to define epipolar geometry")]
    DegenerateMotion { norm: f64 },

    #[error("degenerate epipolar line (zero normal)")]
    DegenerateLine,

    #[error("degenerate patch: {0}")]
    DegeneratePatch(&'static str),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("insufficient data: need at least {needed} correspondences, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("training stalled: no triplets mined during epoch {epoch}")]
    TrainingStalled { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
