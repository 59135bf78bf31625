//! Map growth and refinement.
//!
//! Two jobs live here: deciding where the map needs new Gaussians
//! ([`densify`]) and pulling the existing ones toward the observations
//! ([`optimize_map`] over the loss in [`loss_and_gradients`]). Both consume a
//! [`RenderOutput`] taken against the current field; staleness is caught via
//! the field's generation counter.

mod loss;
mod ssim;

pub use loss::{loss_and_gradients, optimize_map, MapIterationStats, MappingLoss};
pub use ssim::{ssim, ssim_rgb, SsimEval};

use crate::field::{
    initialize_gaussian, FieldError, GaussianField, InitScaleMode,
};
use crate::geometry::{GeometryError, Intrinsics, SE3Pose};
use crate::grid::{GrayF32, GrayF64, Mask};
use crate::render::{RenderError, RenderOutput};
use crate::seq::Frame;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image {width}x{height} is smaller than the {min}x{min} similarity window")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("render was taken at field generation {output}, field is now at {field}")]
    StaleRender { field: u64, output: u64 },
    #[error("no rendering views supplied")]
    NoViews,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// |D - D̃| tolerance of the well-reconstructed depth mask.
pub const DEPTH_MASK_TOL: f64 = 0.05;
/// Rendered luma (0..255 scale) below which a pixel counts as unmodeled;
/// empty space renders black, so darkness is the appearance cue for spawning.
pub const DARK_LUMA: f64 = 50.0;
/// Spawn criterion (1): accumulated transmittance under this is uncovered.
pub const T_UNCOVERED: f64 = 0.8;
/// Spawn criterion (2) gate: nearly saturated pixels never spawn, which keeps
/// depth-edge error from growing the map forever.
pub const T_SATURATED: f64 = 0.99;

/// Direction of the per-pixel depth-error test in spawn criterion (2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthCmp {
    /// Spawn where the error exceeds the adaptive threshold, reading the
    /// criterion as an under-reconstruction detector.
    #[default]
    ErrorAbove,
    /// Spawn where the error is below the threshold instead; kept selectable
    /// for side-by-side comparisons of the two readings.
    ErrorBelow,
}

/// Which Gaussians define the scale-regularizer depth `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaScope {
    /// Max camera-frame depth over Gaussians visible in the current view.
    #[default]
    Visible,
    /// Max camera-frame depth over the whole field.
    AllGaussians,
}

/// Weights and knobs of the map optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Color term weight.
    pub w_rgb: f64,
    /// Rendered (alpha-blended) depth term weight.
    pub w_depth: f64,
    /// Surface depth term weight.
    pub w_surface: f64,
    /// Weight of the combined scale regularizers.
    pub w_reg: f64,
    /// L1 share of the color term; the remainder is the similarity share.
    pub lambda: f64,
    /// `gamma = gamma_coeff * max depth` (scope per [`GammaScope`]).
    pub gamma_coeff: f64,
    pub gamma_scope: GammaScope,
    /// Optimization steps per keyframe event.
    pub iterations: usize,
    /// Spawn sub-sampling stride in pixels (both axes).
    pub spawn_stride: usize,
    pub depth_cmp: DepthCmp,
    pub init_scale: InitScaleMode,
    pub lr: crate::field::FieldLearningRates,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            w_rgb: 1.0,
            w_depth: 0.7,
            w_surface: 0.1,
            w_reg: 5.0,
            lambda: 0.8,
            gamma_coeff: 0.03,
            gamma_scope: GammaScope::default(),
            iterations: 60,
            spawn_stride: 2,
            depth_cmp: DepthCmp::default(),
            init_scale: InitScaleMode::default(),
            lr: crate::field::FieldLearningRates::default(),
        }
    }
}

/// Pixels whose rendered depth already agrees with the sensor: both depths
/// valid and |D - D̃| under `tol`.
pub fn depth_mask(depth: &GrayF32, rendered: &GrayF64, tol: f64) -> Mask {
    assert!(depth.same_shape(rendered), "depth mask shape mismatch");
    let mut m = Mask::new(depth.width(), depth.height(), false);
    for idx in 0..depth.len() {
        let d = depth.at(idx) as f64;
        let r = rendered.at(idx);
        m.data_mut()[idx] = d > 0.0 && r > 0.0 && (d - r).abs() < tol;
    }
    m
}

/// Adaptive spawn threshold: mean + 40 * median of the absolute depth errors
/// over `mask` pixels. Empty mask yields +inf (an even error count takes the
/// average of the middle pair as the median).
pub fn adaptive_threshold(depth: &GrayF32, rendered: &GrayF64, mask: &Mask) -> f64 {
    assert!(depth.same_shape(rendered) && depth.same_shape(mask), "threshold shape mismatch");
    let mut errs: Vec<f64> = Vec::new();
    for idx in 0..depth.len() {
        if mask.at(idx) {
            errs.push((depth.at(idx) as f64 - rendered.at(idx)).abs());
        }
    }
    if errs.is_empty() {
        return f64::INFINITY;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = errs.len();
    let mean = errs.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
    mean + 40.0 * median
}

/// Where and why one view spawned new Gaussians.
#[derive(Debug, Clone)]
pub struct SpawnDecision {
    /// Criterion (1): accumulated transmittance below [`T_UNCOVERED`] at a
    /// pixel with valid sensor depth.
    pub uncovered: Mask,
    /// Criterion (2): dark rendering whose depth error falls on the
    /// configured side of the adaptive threshold, below [`T_SATURATED`].
    pub geometry: Mask,
    /// Union of the two criteria.
    pub combined: Mask,
    /// Gaussians actually added after stride sub-sampling.
    pub spawned: usize,
    /// Adaptive depth-error threshold criterion (2) used.
    pub sigma_d: f64,
}

/// Spawns Gaussians where `output` under-covers `frame`, one per surviving
/// pixel of the stride-sub-sampled criteria union, back-projected at the
/// sensor depth with the frame's color.
pub fn densify(
    field: &mut GaussianField,
    frame: &Frame,
    pose: &SE3Pose,
    intr: &Intrinsics,
    output: &RenderOutput,
    cfg: &MappingConfig,
) -> Result<SpawnDecision, MappingError> {
    if output.generation != field.generation() {
        return Err(MappingError::StaleRender { field: field.generation(), output: output.generation });
    }
    let (w, h) = (intr.width, intr.height);
    if frame.depth.width() != w
        || frame.depth.height() != h
        || !output.depth.same_shape(&frame.depth)
        || !frame.color.same_shape(&frame.depth)
    {
        return Err(MappingError::DimensionMismatch("frame/render/intrinsics disagree".into()));
    }

    let m_d = depth_mask(&frame.depth, &output.depth, DEPTH_MASK_TOL);
    let sigma_d = adaptive_threshold(&frame.depth, &output.depth, &m_d);
    let luma: GrayF64 = output.color.luma();

    let mut uncovered = Mask::new(w, h, false);
    let mut geometry = Mask::new(w, h, false);
    let mut combined = Mask::new(w, h, false);
    for idx in 0..w * h {
        let d = frame.depth.at(idx) as f64;
        if d <= 0.0 {
            continue;
        }
        let t = output.transmittance.at(idx);
        let c1 = t < T_UNCOVERED;
        let e = (d - output.depth.at(idx)).abs();
        let err_side = match cfg.depth_cmp {
            DepthCmp::ErrorAbove => e > sigma_d,
            DepthCmp::ErrorBelow => e < sigma_d,
        };
        let c2 = luma.at(idx) * 255.0 < DARK_LUMA && err_side && t < T_SATURATED;
        uncovered.data_mut()[idx] = c1;
        geometry.data_mut()[idx] = c2;
        combined.data_mut()[idx] = c1 || c2;
    }

    let stride = cfg.spawn_stride.max(1);
    let mut fresh = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if !combined.get(x, y) {
                continue;
            }
            let c = frame.color.get(x, y);
            let g = initialize_gaussian(
                (x as f64, y as f64),
                frame.depth.get(x, y) as f64,
                Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64),
                pose,
                intr,
                cfg.init_scale,
            )?;
            fresh.push(g);
        }
    }
    let spawned = fresh.len();
    if spawned > 0 {
        field.spawn_all(fresh);
    }
    Ok(SpawnDecision { uncovered, geometry, combined, spawned, sigma_d })
}
