//! Rigid-body poses, the pinhole camera model, timestamped trajectories and
//! rigid trajectory alignment.

mod align;
mod camera;
pub(crate) mod se3;
mod trajectory;

pub use align::{umeyama_align, umeyama_align_points};
pub use camera::Intrinsics;
pub use se3::{se3_exp, se3_log, SE3Pose, Twist};
pub use trajectory::Trajectory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// Point at or behind the camera plane cannot be projected.
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    /// Non-positive depth carries no geometry.
    #[error("invalid depth {depth}")]
    InvalidDepth { depth: f64 },
    /// Fewer than three associated pose pairs, or degenerate geometry
    /// (collinear positions) that leaves the rotation unobservable.
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
    /// Timestamps must increase strictly along a trajectory.
    #[error("non-increasing timestamp {t} after {prev}")]
    NonIncreasingTimestamp { prev: f64, t: f64 },
    #[error("trajectory parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
