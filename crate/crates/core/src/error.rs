use std::path::PathBuf;

use thiserror::Error;

use crate::grid::GridStage;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation input: {0}")]
    DegenerateRotationInput(&'static str),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("basis change must be a signed permutation matrix")]
    InvalidBasisChange,

    #[error("degenerate bounding box (w = {w}, h = {h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("push distance {0} must exceed the unit object radius")]
    DistanceTooSmall(f64),

    #[error("grid stage mismatch: expected {expected:?}, found {found:?}")]
    StageMismatch {
        expected: GridStage,
        found: GridStage,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("reference set is empty")]
    EmptyReferenceSet,

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("objective is not finite ({0})")]
    NonFiniteLoss(f64),

    #[error("point {index} lies behind the camera")]
    PointBehindCamera { index: usize },

    #[error("no analytic gradient for this objective")]
    AnalyticGradientUnavailable,

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unknown camera convention {0:?}")]
    ConventionUnknown(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
