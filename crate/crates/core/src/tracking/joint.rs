//! Joint photometric-plus-reprojection pose refinement.
//!
//! The photometric terms only trust pixels the field can actually explain, so
//! every evaluation renders the frame and masks to pixels whose accumulated
//! opacity clears the configured gate. The mask is recomputed from scratch
//! each iteration; the pose moves, so yesterday's coverage is stale.

use super::reproject::{huber_weight, reproject};
use super::{
    Landmark, LandmarkMatch, TrackingConfig, TrackingError, DepthTerm, MIN_MASK_FRACTION,
};
use crate::adam::VecAdam;
use crate::features::FeatureSet;
use crate::field::GaussianField;
use crate::geometry::{Intrinsics, SE3Pose, Twist};
use crate::grid::{GrayF64, Mask, RgbF64};
use crate::mapping::ssim_rgb;
use crate::render::{render, render_backward, RenderConfig, Upstream};
use crate::seq::Frame;

/// Loss increases beyond this tolerance get the step halved, then rejected.
const STEP_TOLERANCE: f64 = 1e-9;
const MAX_HALVINGS: usize = 8;

/// Per-term breakdown of one joint-objective evaluation. Terms are raw; the
/// configured weights only enter `total`.
#[derive(Debug, Clone, Copy)]
pub struct TrackLoss {
    pub total: f64,
    /// `lambda * L1 + (1 - lambda) * (1 - similarity)` over masked pixels.
    pub rgb: f64,
    /// Mean absolute depth error over masked pixels with valid sensor depth.
    pub surface: f64,
    /// Mean Huber cost of the reprojection residuals.
    pub reproject: f64,
    /// Share of pixels whose accumulated opacity clears the gate.
    pub mask_fraction: f64,
    pub masked: usize,
}

fn sgn(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates the masked tracking objective at `pose` and differentiates it
/// against a left-multiplicative pose increment.
#[allow(clippy::too_many_arguments)]
pub fn track_loss_and_pose_gradient(
    field: &GaussianField,
    pose: &SE3Pose,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    frame: &Frame,
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    cfg: &TrackingConfig,
) -> Result<(TrackLoss, Twist), TrackingError> {
    evaluate(field, pose, intr, render_cfg, frame, landmarks, features, matches, cfg, true)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    field: &GaussianField,
    pose: &SE3Pose,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    frame: &Frame,
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    cfg: &TrackingConfig,
    want_grad: bool,
) -> Result<(TrackLoss, Twist), TrackingError> {
    let (w, h) = (intr.width, intr.height);
    if !frame.color.same_shape(&frame.depth)
        || frame.color.width() != w
        || frame.color.height() != h
    {
        return Err(TrackingError::DimensionMismatch("frame/intrinsics disagree".into()));
    }

    let output = render(field, pose, intr, render_cfg);
    let mut mask = Mask::new(w, h, false);
    let mut n_mask = 0usize;
    for idx in 0..w * h {
        if output.transmittance.at(idx) > cfg.gate {
            mask.data_mut()[idx] = true;
            n_mask += 1;
        }
    }
    let mask_fraction = n_mask as f64 / (w * h) as f64;

    let mut pose_grad = Twist::zeros();
    let mut rgb = 0.0;
    let mut l_sur = 0.0;
    if n_mask > 0 {
        let target = frame.color.to_f64();
        let mut up_color = RgbF64::new(w, h, [0.0; 3]);
        let mut l1 = 0.0;
        let l1_w = cfg.w_rgb * cfg.lambda / (3.0 * n_mask as f64);
        for idx in 0..w * h {
            if !mask.at(idx) {
                continue;
            }
            let c = output.color.at(idx);
            let t = target.at(idx);
            let mut g = [0.0; 3];
            for ch in 0..3 {
                let d = c[ch] - t[ch];
                l1 += d.abs();
                g[ch] = l1_w * sgn(d);
            }
            up_color.data_mut()[idx] = g;
        }
        l1 /= 3.0 * n_mask as f64;

        let eval = ssim_rgb(&output.color, &target, Some(&mask))?;
        let ssim_mean = eval.mean();
        rgb = cfg.lambda * l1 + (1.0 - cfg.lambda) * (1.0 - ssim_mean);

        // Depth supervision on masked pixels with a valid sensor reading. A
        // gated pixel always carries a surface crossing (its transmittance
        // fell through 0.5 on the way below 1 - gate), and the blended depth
        // is likewise positive there.
        let rendered_depth = match cfg.depth_term {
            DepthTerm::Surface => &output.surface_depth,
            DepthTerm::Accumulated => &output.depth,
        };
        let mut up_depth = GrayF64::new(w, h, 0.0);
        let mut n_sur = 0usize;
        for idx in 0..w * h {
            let d = frame.depth.at(idx) as f64;
            if !mask.at(idx) || d <= 0.0 || rendered_depth.at(idx) <= 0.0 {
                continue;
            }
            let e = rendered_depth.at(idx) - d;
            l_sur += e.abs();
            n_sur += 1;
            up_depth.data_mut()[idx] = sgn(e);
        }
        if n_sur > 0 {
            l_sur /= n_sur as f64;
        }

        if want_grad {
            let sg = eval.backward(&output.color, &target, -cfg.w_rgb * (1.0 - cfg.lambda));
            for (u, s) in up_color.data_mut().iter_mut().zip(sg.data()) {
                for ch in 0..3 {
                    u[ch] += s[ch];
                }
            }
            if n_sur > 0 {
                let k = cfg.w_surface / n_sur as f64;
                for v in up_depth.data_mut() {
                    *v *= k;
                }
            }
            let (up_blended, up_surface) = match cfg.depth_term {
                DepthTerm::Surface => (None, Some(&up_depth)),
                DepthTerm::Accumulated => (Some(&up_depth), None),
            };
            let grads = render_backward(
                field,
                pose,
                intr,
                render_cfg,
                &output,
                &Upstream {
                    color: Some(&up_color),
                    depth: up_blended,
                    surface_depth: up_surface,
                    transmittance: None,
                },
            )?;
            pose_grad = grads.pose;
        }
    }

    // Robust reprojection term over whatever matches survived outlier
    // removal. Points on or behind the camera plane contribute nothing.
    let mut l_rep = 0.0;
    let mut n_rep = 0usize;
    let mut rep_grad = Twist::zeros();
    if !matches.is_empty() {
        let inv = pose.inverse();
        let r_cw = inv.rotation_matrix();
        for m in matches {
            let kp = &features.keypoints[m.keypoint];
            let Some(rp) =
                reproject(&inv, &r_cw, &landmarks[m.landmark].position, &kp.position, kp.level, intr)
            else {
                continue;
            };
            let e = (rp.residual.norm_squared() / rp.variance).sqrt();
            let wgt = huber_weight(e, cfg.huber_delta);
            l_rep += if e <= cfg.huber_delta {
                e * e
            } else {
                2.0 * cfg.huber_delta * e - cfg.huber_delta * cfg.huber_delta
            };
            n_rep += 1;
            if want_grad {
                rep_grad += rp.jacobian.transpose() * rp.residual * (2.0 * wgt / rp.variance);
            }
        }
        if n_rep > 0 {
            l_rep /= n_rep as f64;
            pose_grad += rep_grad * (cfg.w_reproject / n_rep as f64);
        }
    }

    let total = cfg.w_rgb * rgb + cfg.w_surface * l_sur + cfg.w_reproject * l_rep;
    let loss = TrackLoss { total, rgb, surface: l_sur, reproject: l_rep, mask_fraction, masked: n_mask };
    Ok((loss, pose_grad))
}

/// Result of the joint refinement stage.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub pose: SE3Pose,
    /// Masked-pixel fraction at the last evaluation.
    pub mask_fraction: f64,
    /// The joint stage was abandoned for lack of rendered coverage and
    /// `pose` is the unrefined start.
    pub weak_mask: bool,
    /// Iterations actually run.
    pub iterations: usize,
    /// Accepted objective value per iteration.
    pub losses: Vec<f64>,
}

impl TrackOutcome {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Refines `start` with first-order steps on the masked joint objective.
///
/// Each iteration renders at the current pose, rebuilds the coverage mask,
/// takes one moment-driven step on the 6-DoF twist, and accepts it only if
/// the objective does not increase (halving the step a few times before
/// giving up). A mask below [`MIN_MASK_FRACTION`] aborts refinement and
/// returns `start` with the weak-mask flag set; an empty field lands there
/// too since it renders no coverage at all.
#[allow(clippy::too_many_arguments)]
pub fn track_frame(
    field: &GaussianField,
    start: &SE3Pose,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    frame: &Frame,
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    cfg: &TrackingConfig,
) -> Result<TrackOutcome, TrackingError> {
    let mut pose = *start;
    let mut adam = VecAdam::<6>::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut mask_fraction = 0.0;
    for it in 0..cfg.iterations {
        let (loss, grad) = evaluate(
            field, &pose, intr, render_cfg, frame, landmarks, features, matches, cfg, true,
        )?;
        mask_fraction = loss.mask_fraction;
        if mask_fraction < MIN_MASK_FRACTION {
            return Ok(TrackOutcome {
                pose: *start,
                mask_fraction,
                weak_mask: true,
                iterations: it,
                losses,
            });
        }
        let mut delta = adam.step(cfg.lr, &grad);
        let mut candidate = pose.retract(&delta);
        let mut cand = objective_only(
            field, &candidate, intr, render_cfg, frame, landmarks, features, matches, cfg,
        )?;
        let mut halvings = 0;
        while cand > loss.total + STEP_TOLERANCE && halvings < MAX_HALVINGS {
            delta *= 0.5;
            candidate = pose.retract(&delta);
            cand = objective_only(
                field, &candidate, intr, render_cfg, frame, landmarks, features, matches, cfg,
            )?;
            halvings += 1;
        }
        if cand <= loss.total + STEP_TOLERANCE {
            pose = candidate;
            losses.push(cand);
        } else {
            losses.push(loss.total);
        }
    }
    Ok(TrackOutcome { pose, mask_fraction, weak_mask: false, iterations: cfg.iterations, losses })
}

#[allow(clippy::too_many_arguments)]
fn objective_only(
    field: &GaussianField,
    pose: &SE3Pose,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    frame: &Frame,
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    cfg: &TrackingConfig,
) -> Result<f64, TrackingError> {
    let (loss, _) =
        evaluate(field, pose, intr, render_cfg, frame, landmarks, features, matches, cfg, false)?;
    Ok(loss.total)
}
