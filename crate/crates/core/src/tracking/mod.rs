//! Per-frame pose estimation.
//!
//! A frame's pose starts from a constant-velocity prediction refined by
//! motion-only minimization of robust reprojection error against mapped
//! landmarks. After outlier removal, the pose is polished by a first-order
//! joint objective: photometric and surface-depth terms masked to
//! well-covered pixels, plus the surviving reprojection term.

mod joint;
mod reproject;

pub(crate) use reproject::huber_weight;

pub use joint::{track_frame, track_loss_and_pose_gradient, TrackLoss, TrackOutcome};
pub use reproject::{initial_pose, remove_outliers, PoseInit};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Descriptor;
use crate::mapping::MappingError;
use crate::render::RenderError;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// A mapped 3D point observed by at least one keyframe.
#[derive(Debug, Clone)]
pub struct Landmark {
    /// World-frame position.
    pub position: Vector3<f64>,
    /// (keyframe id, keypoint index) pairs that observe this landmark.
    pub observations: Vec<(usize, usize)>,
    /// Representative descriptor, used when matching new frames.
    pub descriptor: Descriptor,
}

impl Landmark {
    pub fn new(position: Vector3<f64>, keyframe: usize, keypoint: usize, descriptor: Descriptor) -> Landmark {
        Landmark { position, observations: vec![(keyframe, keypoint)], descriptor }
    }
}

/// Pairing of a landmark with a keypoint index in the current frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LandmarkMatch {
    pub landmark: usize,
    pub keypoint: usize,
}

/// Which rendered depth channel supervises the tracking depth term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTerm {
    /// The 0.5-transmittance surface crossing. Robust to semi-transparent
    /// fill-in because it ignores everything behind the first opaque layer.
    #[default]
    Surface,
    /// The alpha-blended expected depth.
    Accumulated,
}

/// Fewest inliers for a trustworthy motion-only solution.
pub const MIN_INLIERS: usize = 10;
/// Optimize-then-reclassify rounds in the motion-only stage.
pub const MAX_ROUNDS: usize = 4;
/// Below this masked-pixel fraction the joint stage falls back to the
/// reprojection-only pose.
pub const MIN_MASK_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Photometric weight in the joint objective.
    pub w_rgb: f64,
    /// Depth-term weight in the joint objective.
    pub w_surface: f64,
    /// Reprojection weight in the joint objective.
    pub w_reproject: f64,
    /// L1 share of the photometric term; the rest is structural.
    pub lambda: f64,
    /// Joint-stage iteration budget.
    pub iterations: usize,
    /// Joint-stage step size.
    pub lr: f64,
    /// Pixels with accumulated opacity above this feed the masked terms.
    pub gate: f64,
    /// Huber threshold in scale-normalized pixels.
    pub huber_delta: f64,
    /// Squared-residual cutoff for reprojection outliers (2 DoF, 95%).
    pub chi2: f64,
    pub depth_term: DepthTerm,
}

impl Default for TrackingConfig {
    fn default() -> TrackingConfig {
        TrackingConfig {
            w_rgb: 1.0,
            w_surface: 0.7,
            w_reproject: 0.1,
            lambda: 0.8,
            iterations: 40,
            lr: 5e-3,
            gate: 0.99,
            huber_delta: 2.447,
            chi2: 5.991,
            depth_term: DepthTerm::Surface,
        }
    }
}

/// Measurement variance of a keypoint observation at `level`.
pub(crate) fn level_variance(level: u8) -> f64 {
    1.2f64.powi(2 * level as i32)
}
