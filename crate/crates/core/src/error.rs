use std::path::PathBuf;

use dnloc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("disparity {disparity} px is at or below the floor {floor} px")]
    NearInfiniteDepth { disparity: f64, floor: f64 },
    #[error("degenerate match set: {survivors} matches survive, at least 3 required")]
    DegenerateMatchSet { survivors: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("localization failed: best RANSAC consensus has {best} inliers")]
    LocalizationFailure { best: usize },
    #[error("non-finite gradient in parameter {param}; step aborted")]
    NonFiniteGradient { param: String },
    #[error("too few visible scene points ({visible})")]
    TooFewVisiblePoints { visible: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("every training step in epoch {epoch} was skipped")]
    DegenerateEpoch { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
