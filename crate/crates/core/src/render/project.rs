//! EWA-style projection of one Gaussian into the image plane.
//!
//! Evaluation order is part of the contract: every product and sum below is
//! written in the exact shape an independent reimplementation of the
//! formulas would use, so outputs can be compared bit for bit.

use super::{quat_to_mat, RenderConfig};
use crate::field::Gaussian;
use crate::geometry::{Intrinsics, SE3Pose};

/// A Gaussian on the image plane.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    /// Index into the field this was projected from.
    pub index: u32,
    /// Center in pixel coordinates.
    pub mean: [f64; 2],
    /// Dilated image-plane covariance `[c00, c01, c11]` (symmetric).
    pub cov: [f64; 3],
    /// Its inverse `[i00, i01, i11]`.
    pub cov_inv: [f64; 3],
    /// Camera-frame center depth.
    pub z: f64,
    /// Conservative pixel bounds of the cutoff ellipse (inclusive); empty
    /// ranges mean the Gaussian influences no pixel.
    pub x_min: i64,
    pub x_max: i64,
    pub y_min: i64,
    pub y_max: i64,
}

/// World-to-camera rotation and camera origin, precomputed once per render.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CameraFrame {
    /// `R_cw`, rows of the camera axes in world coordinates.
    pub r_cw: [[f64; 3]; 3],
    /// Camera center `t_wc`; camera point of `p` is `R_cw (p - t_wc)`.
    pub t_wc: [f64; 3],
}

impl CameraFrame {
    pub fn from_pose(pose: &SE3Pose) -> Self {
        let q = pose.rotation.quaternion();
        let r_wc = quat_to_mat(q.w, q.i, q.j, q.k);
        // transpose
        let r_cw = [
            [r_wc[0][0], r_wc[1][0], r_wc[2][0]],
            [r_wc[0][1], r_wc[1][1], r_wc[2][1]],
            [r_wc[0][2], r_wc[1][2], r_wc[2][2]],
        ];
        Self { r_cw, t_wc: [pose.translation.x, pose.translation.y, pose.translation.z] }
    }

    #[inline]
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.t_wc[0], p[1] - self.t_wc[1], p[2] - self.t_wc[2]];
        [
            self.r_cw[0][0] * d[0] + self.r_cw[0][1] * d[1] + self.r_cw[0][2] * d[2],
            self.r_cw[1][0] * d[0] + self.r_cw[1][1] * d[1] + self.r_cw[1][2] * d[2],
            self.r_cw[2][0] * d[0] + self.r_cw[2][1] * d[1] + self.r_cw[2][2] * d[2],
        ]
    }
}

/// 3D covariance `R S S^T R^T` as upper-triangle expressions mirrored into a
/// full matrix: `M = R diag(s)`, `cov_ab = sum_k M_ak M_bk` for `a <= b`.
#[inline]
pub(crate) fn world_covariance(g: &Gaussian) -> [[f64; 3]; 3] {
    let q = g.rotation.quaternion();
    let r = quat_to_mat(q.w, q.i, q.j, q.k);
    let s = [g.scale.x, g.scale.y, g.scale.z];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = r[i][k] * s[k];
        }
    }
    let mut c = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let v = m[a][0] * m[b][0] + m[a][1] * m[b][1] + m[a][2] * m[b][2];
            c[a][b] = v;
            c[b][a] = v;
        }
    }
    c
}

/// Projects one Gaussian; `None` when culled by the near plane.
///
/// `A = J W` exploiting the projection Jacobian's sparsity, `cov2d = A
/// cov3d A^T` (upper triangle mirrored) plus dilation on the diagonal.
pub(crate) fn project_with_frame(
    g: &Gaussian,
    index: u32,
    cam: &CameraFrame,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let pc = cam.to_camera([g.position.x, g.position.y, g.position.z]);
    let (xc, yc, zc) = (pc[0], pc[1], pc[2]);
    if zc <= cfg.near_clip {
        return None;
    }

    let mean = [intr.fx * xc / zc + intr.cx, intr.fy * yc / zc + intr.cy];

    let zz = zc * zc;
    let j00 = intr.fx / zc;
    let j02 = -(intr.fx * xc) / zz;
    let j11 = intr.fy / zc;
    let j12 = -(intr.fy * yc) / zz;

    let w = &cam.r_cw;
    let mut a = [[0.0; 3]; 2];
    for j in 0..3 {
        a[0][j] = j00 * w[0][j] + j02 * w[2][j];
        a[1][j] = j11 * w[1][j] + j12 * w[2][j];
    }

    let sigma = world_covariance(g);
    let mut c = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            c[i][j] = a[i][0] * sigma[0][j] + a[i][1] * sigma[1][j] + a[i][2] * sigma[2][j];
        }
    }
    let c00 = c[0][0] * a[0][0] + c[0][1] * a[0][1] + c[0][2] * a[0][2] + cfg.dilation;
    let c01 = c[0][0] * a[1][0] + c[0][1] * a[1][1] + c[0][2] * a[1][2];
    let c11 = c[1][0] * a[1][0] + c[1][1] * a[1][1] + c[1][2] * a[1][2] + cfg.dilation;

    let det = c00 * c11 - c01 * c01;
    if det <= 0.0 {
        // dilation makes this unreachable for finite inputs; drop defensively
        return None;
    }
    let i00 = c11 / det;
    let i01 = -c01 / det;
    let i11 = c00 / det;

    // Tight axis-aligned bounds of the cutoff ellipse, padded a pixel so
    // floating-point rounding at the rim can never disagree with the
    // per-pixel Mahalanobis test.
    let (x_min, x_max, y_min, y_max) = if cfg.cutoff_sigma.is_finite() {
        let rx = cfg.cutoff_sigma * c00.sqrt();
        let ry = cfg.cutoff_sigma * c11.sqrt();
        (
            (mean[0] - rx).floor() as i64 - 1,
            (mean[0] + rx).ceil() as i64 + 1,
            (mean[1] - ry).floor() as i64 - 1,
            (mean[1] + ry).ceil() as i64 + 1,
        )
    } else {
        (i64::MIN / 2, i64::MAX / 2, i64::MIN / 2, i64::MAX / 2)
    };

    Some(ProjectedGaussian {
        index,
        mean,
        cov: [c00, c01, c11],
        cov_inv: [i00, i01, i11],
        z: zc,
        x_min,
        x_max,
        y_min,
        y_max,
    })
}

/// Public single-Gaussian projection under a camera-to-world `pose`.
pub fn project_gaussian(
    g: &Gaussian,
    pose: &SE3Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    project_with_frame(g, 0, &CameraFrame::from_pose(pose), intr, cfg)
}

/// Canonical per-pixel Mahalanobis form shared by forward and backward.
#[inline]
pub(crate) fn mahalanobis(dx: f64, dy: f64, inv: &[f64; 3]) -> f64 {
    dx * dx * inv[0] + 2.0 * (dx * dy * inv[1]) + dy * dy * inv[2]
}
