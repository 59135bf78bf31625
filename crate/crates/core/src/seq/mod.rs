//! Sequence input and evaluation: TUM-format RGB-D loading, synthetic
//! scene generation with exact ground truth, and trajectory/image metrics.

mod metrics;
mod synth;
mod tum;

pub use metrics::{ate_rmse, psnr};
pub use synth::{build_room, orbit_poses, synth_sequence, DepthChannel, SyntheticSceneSpec};
pub use tum::{load_tum, TumLoader};

use crate::geometry::SE3Pose;
use crate::grid::{GrayF32, RgbF32};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("missing index file {0}")]
    MissingIndex(String),
    #[error("no frames after association")]
    Empty,
    #[error("image {path}: {msg}")]
    BadImage { path: String, msg: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("trajectories share fewer than {need} timestamps")]
    TooFewAssociations { need: usize },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One RGB-D observation. Depth is metric; 0 marks an invalid reading.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub color: RgbF32,
    pub depth: GrayF32,
    /// Estimated camera-to-world pose, filled in by tracking.
    pub pose: Option<SE3Pose>,
}

impl Frame {
    pub fn new(timestamp: f64, color: RgbF32, depth: GrayF32) -> Self {
        Self { timestamp, color, depth, pose: None }
    }
}
