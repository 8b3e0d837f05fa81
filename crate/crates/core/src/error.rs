use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("rotation angle {0} too close to pi for log map")]
    LogNearPi(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("landmark {landmark} observation in frame {frame} at ({u}, {v}) is out of bounds")]
    BadLandmarkObservation {
        landmark: u64,
        frame: usize,
        u: f64,
        v: f64,
    },
    #[error("degenerate synthetic config: {0}")]
    DegenerateConfig(String),

    #[error("no landmark observation with valid depth in a static region")]
    NoValidObservations,
    #[error("scale solution is not positive")]
    NonPositiveScale,
    #[error("optimization diverged: energy increased after {0} step halvings")]
    DivergedOptimization(usize),
    #[error("no valid correspondence pairs between frames")]
    EmptyOverlap,

    #[error("frame {0} has an empty hand mask")]
    EmptyHandMask(usize),
    #[error("frame {0} has no valid depth under its hand mask")]
    NoValidHandDepth(usize),
    #[error("no point projects inside the image")]
    NoVisiblePoints,
    #[error("no heatmap pixel at or above threshold with valid depth")]
    NothingAboveThreshold,

    #[error("surface normal is degenerate (zero gradient)")]
    DegenerateNormal,
    #[error("goal set is empty")]
    EmptyGoals,
    #[error("agent point set is empty")]
    EmptyAgentPoints,
    #[error("waypoint {0} coincides with the trajectory start")]
    DegenerateSegment(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad schedule parameters: {0}")]
    BadScheduleParams(String),
    #[error("step index {k} outside 1..={max}")]
    BadStepIndex { k: usize, max: usize },
    #[error("horizon mismatch: expected {expected}, got {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {0} (loss is not finite)")]
    DivergedTraining(usize),
    #[error("unknown gradcheck target `{0}`")]
    UnknownTarget(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("volume file: {0}")]
    VolumeFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
