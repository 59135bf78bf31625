//! Analytic adjoint of the forward blend.
//!
//! Phase A walks each pixel's blend records back to front, accumulating
//! gradients w.r.t. each projected Gaussian's image-plane quantities (mean,
//! covariance, depth, opacity, color). Phase B chains those through the
//! projection into world-space parameters and the 6-DoF camera increment.
//!
//! Conventions the math below relies on:
//! - the alpha clamp kills the opacity/shape chain when active (its local
//!   derivative is zero) while depth and suffix terms still flow;
//! - the surface-depth channel routes its upstream gradient through the
//!   depth of the selected Gaussian only, treating the argmax as locally
//!   constant;
//! - quaternion gradients are raw 4-vectors of the textbook rotation
//!   formula evaluated at the stored (unit) quaternion, ordered (w, x, y, z);
//! - the pose gradient is w.r.t. a left-multiplicative `[v, w]` increment on
//!   the camera-to-world pose.

use super::project::{mahalanobis, CameraFrame};
use super::{RenderConfig, RenderError, RenderOutput};
use crate::field::{FieldGradients, GaussianField};
use crate::geometry::{Intrinsics, SE3Pose};
use crate::grid::{GrayF64, RgbF64};
use rayon::prelude::*;

/// Upstream loss gradients per render channel; `None` means zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub color: Option<&'a RgbF64>,
    pub depth: Option<&'a GrayF64>,
    pub surface_depth: Option<&'a GrayF64>,
    pub transmittance: Option<&'a GrayF64>,
}

/// Per-projected-Gaussian image-plane gradients out of phase A.
#[derive(Debug, Clone, Copy, Default)]
struct PlaneGrad {
    mean: [f64; 2],
    cov: [f64; 3],
    z: f64,
    opacity: f64,
    color: [f64; 3],
}

impl PlaneGrad {
    fn add(&mut self, o: &PlaneGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.cov[k] += o.cov[k];
            self.color[k] += o.color[k];
        }
        self.z += o.z;
        self.opacity += o.opacity;
    }
}

/// Gradient of the rendered channels w.r.t. field parameters and pose.
///
/// `output` must come from [`super::render`] on this exact `field`, `pose`,
/// `intr` and `cfg`; a structural field edit in between is detected through
/// the generation counter and rejected.
pub fn render_backward(
    field: &GaussianField,
    pose: &SE3Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    output: &RenderOutput,
    upstream: &Upstream,
) -> Result<FieldGradients, RenderError> {
    if output.generation != field.generation() {
        return Err(RenderError::StaleRender { render: output.generation, field: field.generation() });
    }
    let (w, h) = (intr.width, intr.height);
    for g in [upstream.depth, upstream.surface_depth, upstream.transmittance] {
        if let Some(g) = g {
            if g.width() != w || g.height() != h {
                return Err(RenderError::UpstreamShapeMismatch);
            }
        }
    }
    if let Some(c) = upstream.color {
        if c.width() != w || c.height() != h {
            return Err(RenderError::UpstreamShapeMismatch);
        }
    }

    let n_proj = output.projected.len();
    let mut grads = FieldGradients::zeros(field.len());
    if n_proj == 0 {
        return Ok(grads);
    }

    // Phase A, parallel over fixed row chunks folded in order.
    const CHUNK_ROWS: usize = 32;
    let chunk_results: Vec<Vec<PlaneGrad>> = (0..h.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![PlaneGrad::default(); n_proj];
            let y0 = chunk * CHUNK_ROWS;
            let y1 = (y0 + CHUNK_ROWS).min(h);
            for y in y0..y1 {
                for x in 0..w {
                    let idx = y * w + x;
                    let recs = output.records.pixel(idx);
                    if recs.is_empty() {
                        continue;
                    }
                    let uc = upstream.color.map_or([0.0; 3], |g| g.at(idx));
                    let ud = upstream.depth.map_or(0.0, |g| g.at(idx));
                    let us = upstream.surface_depth.map_or(0.0, |g| g.at(idx));
                    let ut = upstream.transmittance.map_or(0.0, |g| g.at(idx));
                    if uc == [0.0; 3] && ud == 0.0 && us == 0.0 && ut == 0.0 {
                        continue;
                    }

                    let px = x as f64;
                    let py = y as f64;
                    // suffix sums over records behind the current one
                    let mut sc = [0.0f64; 3];
                    let mut sd = 0.0f64;
                    let mut st = 0.0f64;
                    let mut surface_pending = us != 0.0 && output.surface_depth.at(idx) > 0.0;
                    for rec in recs.iter().rev() {
                        let p = &output.projected[rec.projected as usize];
                        let g = field.get(p.index as usize);
                        let a = &mut acc[rec.projected as usize];
                        let wgt = rec.alpha * rec.transmittance;

                        a.color[0] += uc[0] * wgt;
                        a.color[1] += uc[1] * wgt;
                        a.color[2] += uc[2] * wgt;
                        a.z += ud * wgt;
                        if surface_pending && rec.transmittance > 0.5 {
                            a.z += us;
                            surface_pending = false;
                        }

                        let color_dot = uc[0] * g.color.x + uc[1] * g.color.y + uc[2] * g.color.z;
                        let direct = rec.transmittance * (color_dot + ud * p.z + ut);
                        let suffix = (uc[0] * sc[0] + uc[1] * sc[1] + uc[2] * sc[2] + ud * sd + ut * st)
                            / (1.0 - rec.alpha);
                        let dalpha = direct - suffix;

                        sc[0] += g.color.x * wgt;
                        sc[1] += g.color.y * wgt;
                        sc[2] += g.color.z * wgt;
                        sd += p.z * wgt;
                        st += wgt;

                        // alpha -> opacity and shape, unless the clamp is active
                        let dx = px - p.mean[0];
                        let dy = py - p.mean[1];
                        let maha = mahalanobis(dx, dy, &p.cov_inv);
                        let gval = (-0.5 * maha).exp();
                        if g.opacity * gval >= cfg.alpha_clamp {
                            continue;
                        }
                        a.opacity += dalpha * gval;
                        let d_gval = dalpha * g.opacity;
                        let dmaha = d_gval * (-0.5 * gval);
                        let q0 = p.cov_inv[0] * dx + p.cov_inv[1] * dy;
                        let q1 = p.cov_inv[1] * dx + p.cov_inv[2] * dy;
                        a.mean[0] -= dmaha * 2.0 * q0;
                        a.mean[1] -= dmaha * 2.0 * q1;
                        // d maha / d cov (through the inverse): -[q0^2, 2 q0 q1, q1^2]
                        a.cov[0] -= dmaha * q0 * q0;
                        a.cov[1] -= dmaha * 2.0 * q0 * q1;
                        a.cov[2] -= dmaha * q1 * q1;
                    }
                }
            }
            acc
        })
        .collect();

    let mut plane = vec![PlaneGrad::default(); n_proj];
    for chunk in &chunk_results {
        for (dst, src) in plane.iter_mut().zip(chunk) {
            dst.add(src);
        }
    }
    drop(chunk_results);

    // Phase B: chain image-plane gradients through the projection.
    let cam = CameraFrame::from_pose(pose);
    struct GaussOut {
        index: u32,
        position: [f64; 3],
        quat: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
        pose: [f64; 6],
    }

    let outs: Vec<GaussOut> = (0..n_proj)
        .into_par_iter()
        .map(|k| {
            let p = &output.projected[k];
            let pg = &plane[k];
            let g = field.get(p.index as usize);
            let mut out = GaussOut {
                index: p.index,
                position: [0.0; 3],
                quat: [0.0; 4],
                scale: [0.0; 3],
                opacity: pg.opacity,
                color: pg.color,
                pose: [0.0; 6],
            };

            // Recreate forward intermediates.
            let pc = cam.to_camera([g.position.x, g.position.y, g.position.z]);
            let (xc, yc, zc) = (pc[0], pc[1], pc[2]);
            let zz = zc * zc;
            let j00 = intr.fx / zc;
            let j02 = -(intr.fx * xc) / zz;
            let j11 = intr.fy / zc;
            let j12 = -(intr.fy * yc) / zz;
            let wm = &cam.r_cw;
            let mut a = [[0.0; 3]; 2];
            for j in 0..3 {
                a[0][j] = j00 * wm[0][j] + j02 * wm[2][j];
                a[1][j] = j11 * wm[1][j] + j12 * wm[2][j];
            }
            let q = g.rotation.quaternion();
            let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
            let r = super::quat_to_mat(qw, qx, qy, qz);
            let s = [g.scale.x, g.scale.y, g.scale.z];
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for kk in 0..3 {
                    m[i][kk] = r[i][kk] * s[kk];
                }
            }
            let mut sigma = [[0.0; 3]; 3];
            for aa in 0..3 {
                for bb in aa..3 {
                    let v = m[aa][0] * m[bb][0] + m[aa][1] * m[bb][1] + m[aa][2] * m[bb][2];
                    sigma[aa][bb] = v;
                    sigma[bb][aa] = v;
                }
            }
            let mut c = [[0.0; 3]; 2];
            for i in 0..2 {
                for j in 0..3 {
                    c[i][j] = a[i][0] * sigma[0][j] + a[i][1] * sigma[1][j] + a[i][2] * sigma[2][j];
                }
            }

            let (g00, g01, g11) = (pg.cov[0], pg.cov[1], pg.cov[2]);
            // cov00 = C0 . A0 (+dil), cov01 = C0 . A1, cov11 = C1 . A1 (+dil)
            let mut gc = [[0.0; 3]; 2];
            let mut ga = [[0.0; 3]; 2];
            for j in 0..3 {
                gc[0][j] = g00 * a[0][j] + g01 * a[1][j];
                gc[1][j] = g11 * a[1][j];
                ga[0][j] = g00 * c[0][j];
                ga[1][j] = g01 * c[0][j] + g11 * c[1][j];
            }
            // C = A Sigma: spread into A and Sigma
            let mut gsig_full = [[0.0; 3]; 3];
            for i in 0..2 {
                for kk in 0..3 {
                    ga[i][kk] += gc[i][0] * sigma[kk][0] + gc[i][1] * sigma[kk][1] + gc[i][2] * sigma[kk][2];
                }
            }
            for kk in 0..3 {
                for j in 0..3 {
                    gsig_full[kk][j] = a[0][kk] * gc[0][j] + a[1][kk] * gc[1][j];
                }
            }
            // Sigma's upper triangle is mirrored; fold the adjoint accordingly,
            // then through sigma_ab = sum_k M_ak M_bk and M_ik = R_ik s_k.
            let mut gm = [[0.0; 3]; 3];
            for aa in 0..3 {
                for bb in aa..3 {
                    let coeff = if aa == bb {
                        gsig_full[aa][aa]
                    } else {
                        gsig_full[aa][bb] + gsig_full[bb][aa]
                    };
                    for kk in 0..3 {
                        if aa == bb {
                            gm[aa][kk] += coeff * 2.0 * m[aa][kk];
                        } else {
                            gm[aa][kk] += coeff * m[bb][kk];
                            gm[bb][kk] += coeff * m[aa][kk];
                        }
                    }
                }
            }
            let mut gr = [[0.0; 3]; 3];
            for i in 0..3 {
                for kk in 0..3 {
                    out.scale[kk] += gm[i][kk] * r[i][kk];
                    gr[i][kk] = gm[i][kk] * s[kk];
                }
            }
            // quaternion partials of the textbook rotation matrix
            let dr_dw = [[0.0, -2.0 * qz, 2.0 * qy], [2.0 * qz, 0.0, -2.0 * qx], [-2.0 * qy, 2.0 * qx, 0.0]];
            let dr_dx = [[0.0, 2.0 * qy, 2.0 * qz], [2.0 * qy, -4.0 * qx, -2.0 * qw], [2.0 * qz, 2.0 * qw, -4.0 * qx]];
            let dr_dy = [[-4.0 * qy, 2.0 * qx, 2.0 * qw], [2.0 * qx, 0.0, 2.0 * qz], [-2.0 * qw, 2.0 * qz, -4.0 * qy]];
            let dr_dz = [[-4.0 * qz, -2.0 * qw, 2.0 * qx], [2.0 * qw, -4.0 * qz, 2.0 * qy], [2.0 * qx, 2.0 * qy, 0.0]];
            for (ci, dr) in [dr_dw, dr_dx, dr_dy, dr_dz].iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += gr[i][j] * dr[i][j];
                    }
                }
                out.quat[ci] = acc;
            }

            // A = J W with J sparse: J row 0 holds (j00, 0, j02), row 1 (0, j11, j12).
            let mut gj = [0.0f64; 4]; // j00, j02, j11, j12
            let mut gw = [[0.0; 3]; 3];
            for j in 0..3 {
                gj[0] += ga[0][j] * wm[0][j];
                gj[1] += ga[0][j] * wm[2][j];
                gj[2] += ga[1][j] * wm[1][j];
                gj[3] += ga[1][j] * wm[2][j];
                gw[0][j] += ga[0][j] * j00;
                gw[1][j] += ga[1][j] * j11;
                gw[2][j] += ga[0][j] * j02 + ga[1][j] * j12;
            }

            // Camera-point gradient: mean, depth channel, and J's dependence.
            let mut g_xc = [
                pg.mean[0] * j00,
                pg.mean[1] * j11,
                pg.mean[0] * j02 + pg.mean[1] * j12 + pg.z,
            ];
            g_xc[0] += gj[1] * (-intr.fx / zz);
            g_xc[1] += gj[3] * (-intr.fy / zz);
            g_xc[2] += gj[0] * (-intr.fx / zz)
                + gj[2] * (-intr.fy / zz)
                + gj[1] * (2.0 * intr.fx * xc / (zz * zc))
                + gj[3] * (2.0 * intr.fy * yc / (zz * zc));

            // World position: X_c = R_cw (X_w - t)  =>  dL/dX_w = R_cw^T g_xc.
            for axis in 0..3 {
                out.position[axis] = wm[0][axis] * g_xc[0] + wm[1][axis] * g_xc[1] + wm[2][axis] * g_xc[2];
            }

            // Pose increment [v, w] on the camera-to-world pose.
            for axis in 0..3 {
                out.pose[axis] = -out.position[axis];
            }
            let xw = [g.position.x, g.position.y, g.position.z];
            let pg_w = out.position;
            // -X_w x (R_wc g_xc) = pg_w x X_w
            let t1 = [
                pg_w[1] * xw[2] - pg_w[2] * xw[1],
                pg_w[2] * xw[0] - pg_w[0] * xw[2],
                pg_w[0] * xw[1] - pg_w[1] * xw[0],
            ];
            // B = R_wc GW = R_cw^T GW; term2 = -vee(B - B^T)
            let mut b = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    b[i][j] = wm[0][i] * gw[0][j] + wm[1][i] * gw[1][j] + wm[2][i] * gw[2][j];
                }
            }
            let t2 = [b[2][1] - b[1][2], b[0][2] - b[2][0], b[1][0] - b[0][1]];
            out.pose[3] = t1[0] - t2[0];
            out.pose[4] = t1[1] - t2[1];
            out.pose[5] = t1[2] - t2[2];

            out
        })
        .collect();

    for o in outs {
        let i = o.index as usize;
        grads.position[i] = nalgebra::Vector3::new(o.position[0], o.position[1], o.position[2]);
        grads.rotation[i] = nalgebra::Vector4::new(o.quat[0], o.quat[1], o.quat[2], o.quat[3]);
        grads.scale[i] = nalgebra::Vector3::new(o.scale[0], o.scale[1], o.scale[2]);
        grads.opacity[i] = o.opacity;
        grads.color[i] = nalgebra::Vector3::new(o.color[0], o.color[1], o.color[2]);
        for axis in 0..6 {
            grads.pose[axis] += o.pose[axis];
        }
    }
    Ok(grads)
}
