//! Differentiable alpha-blend renderer over the Gaussian field.
//!
//! Forward model per pixel, over Gaussians sorted by camera-frame center
//! depth (front to back):
//!
//! ```text
//! alpha_i = min(o_i * exp(-1/2 d^T cov2d_i^-1 d), 0.999)
//! C  = sum c_i alpha_i T_i          T_1 = 1, T_{i+1} = T_i (1 - alpha_i)
//! D  = sum z_i alpha_i T_i
//! Ts = sum alpha_i T_i
//! Ds = z of the last blended Gaussian with T_i > 0.5, else 0
//! ```
//!
//! `cov2d = J W cov3d W^T J^T + 0.3 I` is the first-order image-plane
//! covariance (`J` the projection Jacobian at the center, `W` the
//! world-to-camera rotation), `cov3d = R S S^T R^T`. Blending stops early
//! once `T_i` drops below a configurable floor, and Gaussians are skipped
//! per pixel beyond a configurable Mahalanobis radius; both cutoffs can be
//! disabled (0 / infinity) to make the computation exhaustive.
//!
//! Arithmetic here sticks to a fixed scalar evaluation order (documented in
//! `project.rs`/`forward.rs`), so an independent straight-line reimplementation
//! of the formulas above reproduces the buffers bit for bit; the structural
//! shortcuts (depth sort, row bucketing, bounding boxes, row parallelism)
//! never change a single bit of output. A Gaussian whose alpha evaluates to
//! exactly zero at a pixel is not blended: it would contribute nothing and
//! must not claim the surface-depth slot.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, Upstream};
pub use forward::render;
pub use project::{project_gaussian, ProjectedGaussian};

use crate::grid::{GrayF64, RgbF64};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    /// The field changed structurally since this output was rendered.
    #[error("render taken at field generation {render}, field is now at {field}")]
    StaleRender { render: u64, field: u64 },
    #[error("upstream gradient buffers do not match the render dimensions")]
    UpstreamShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Per-sample opacity ceiling; keeps `1 - alpha` bounded away from zero.
    pub alpha_clamp: f64,
    /// Stop blending a pixel once residual transmittance falls below this.
    /// `0.0` disables early termination.
    pub early_stop: f64,
    /// Per-pixel influence cutoff in Mahalanobis sigmas. `f64::INFINITY`
    /// disables the cutoff.
    pub cutoff_sigma: f64,
    /// Cull Gaussians whose camera-frame center depth is at or below this.
    pub near_clip: f64,
    /// Added to both diagonal entries of every image-plane covariance.
    pub dilation: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { alpha_clamp: 0.999, early_stop: 1e-4, cutoff_sigma: 3.0, near_clip: 0.05, dilation: 0.3 }
    }
}

impl RenderConfig {
    /// Exhaustive variant: no early termination, no influence cutoff.
    pub fn exhaustive(mut self) -> Self {
        self.early_stop = 0.0;
        self.cutoff_sigma = f64::INFINITY;
        self
    }
}

/// One blended contribution at a pixel, in front-to-back order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRecord {
    /// Index into [`RenderOutput::projected`].
    pub projected: u32,
    /// Clamped alpha actually blended.
    pub alpha: f64,
    /// Residual transmittance before this contribution.
    pub transmittance: f64,
}

/// Per-pixel blend records, flattened row-major.
#[derive(Debug, Clone, Default)]
pub struct BlendList {
    pub offsets: Vec<u32>,
    pub records: Vec<BlendRecord>,
}

impl BlendList {
    pub fn pixel(&self, idx: usize) -> &[BlendRecord] {
        &self.records[self.offsets[idx] as usize..self.offsets[idx + 1] as usize]
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: RgbF64,
    /// Alpha-accumulated depth `D`.
    pub depth: GrayF64,
    /// Surface depth `Ds`: deepest blended center whose pre-blend
    /// transmittance exceeded 0.5; 0 where no Gaussian qualifies.
    pub surface_depth: GrayF64,
    /// Accumulated blend weight `Ts = sum alpha_i T_i`; equals
    /// `1 - `residual transmittance up to floating-point slack.
    pub transmittance: GrayF64,
    pub records: BlendList,
    /// Projected Gaussians that survived culling, sorted by center depth.
    pub projected: Vec<ProjectedGaussian>,
    /// Field generation this render was taken from.
    pub generation: u64,
}

/// Textbook rotation matrix of a unit quaternion `(w, x, y, z)`, row-major.
///
/// Spelled out rather than delegated so the backward pass differentiates
/// exactly these expressions.
#[inline]
pub(crate) fn quat_to_mat(w: f64, x: f64, y: f64, z: f64) -> [[f64; 3]; 3] {
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
