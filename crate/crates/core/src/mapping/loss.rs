//! The map-optimization loss and the step loop over rendering views.
//!
//! One evaluation couples four supervision signals against a render: an
//! L1+similarity color term, alpha-blended depth, surface depth, and a pair
//! of scale regularizers gated by a depth-derived threshold `gamma`. The
//! returned gradients cover every Gaussian parameter and the camera pose,
//! including the path through `gamma` itself (its defining Gaussian moves,
//! so the threshold moves with it).

use super::ssim::ssim_rgb;
use super::{GammaScope, MappingConfig, MappingError};
use crate::field::{FieldGradients, GaussianField};
use crate::geometry::{Intrinsics, SE3Pose};
use crate::grid::{GrayF64, RgbF64};
use crate::render::{render, render_backward, RenderConfig, RenderOutput, Upstream};
use crate::seq::Frame;
use nalgebra::Vector3;

/// Per-term breakdown of one loss evaluation. Terms are reported raw; the
/// configured weights only enter `total`.
#[derive(Debug, Clone, Copy)]
pub struct MappingLoss {
    pub total: f64,
    /// `lambda * L1 + (1 - lambda) * (1 - similarity)`.
    pub rgb: f64,
    pub color_l1: f64,
    /// Mean similarity score itself (1 at a perfect reproduction).
    pub ssim: f64,
    pub depth: f64,
    pub surface: f64,
    pub iso: f64,
    pub scale_reg: f64,
    /// Scale threshold used by the regularizers; +inf when no Gaussian was
    /// available to define it (which disables both).
    pub gamma: f64,
    /// Gaussians with a scale component over `gamma`.
    pub over_gamma: usize,
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

/// Evaluates the mapping loss of `output` against `frame` and accumulates
/// gradients for all Gaussian parameters and the 6-DoF camera pose.
pub fn loss_and_gradients(
    field: &GaussianField,
    pose: &SE3Pose,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    output: &RenderOutput,
    frame: &Frame,
    cfg: &MappingConfig,
) -> Result<(MappingLoss, FieldGradients), MappingError> {
    if output.generation != field.generation() {
        return Err(MappingError::StaleRender { field: field.generation(), output: output.generation });
    }
    let (w, h) = (intr.width, intr.height);
    if output.color.width() != w
        || output.color.height() != h
        || !frame.color.same_shape(&output.color)
        || !frame.depth.same_shape(&output.depth)
    {
        return Err(MappingError::DimensionMismatch("frame/render/intrinsics disagree".into()));
    }

    let target = frame.color.to_f64();
    let n_px = (w * h) as f64;

    // Color: per-channel L1 plus structural similarity.
    let mut up_color = RgbF64::new(w, h, [0.0; 3]);
    let mut l1 = 0.0;
    let l1_w = cfg.w_rgb * cfg.lambda / (3.0 * n_px);
    for idx in 0..w * h {
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
    l1 /= 3.0 * n_px;

    let eval = ssim_rgb(&output.color, &target, None)?;
    let ssim_mean = eval.mean();
    let sg = eval.backward(&output.color, &target, -cfg.w_rgb * (1.0 - cfg.lambda));
    for (u, s) in up_color.data_mut().iter_mut().zip(sg.data()) {
        for ch in 0..3 {
            u[ch] += s[ch];
        }
    }

    // Depth terms, restricted to valid sensor depth; the surface term
    // additionally needs a surface pick at the pixel.
    let mut up_depth = GrayF64::new(w, h, 0.0);
    let mut up_surface = GrayF64::new(w, h, 0.0);
    let mut l_d = 0.0;
    let mut n_d = 0usize;
    let mut l_sur = 0.0;
    let mut n_sur = 0usize;
    for idx in 0..w * h {
        let d = frame.depth.at(idx) as f64;
        if d <= 0.0 {
            continue;
        }
        let e = output.depth.at(idx) - d;
        l_d += e.abs();
        n_d += 1;
        up_depth.data_mut()[idx] = sgn(e);
        let s = output.surface_depth.at(idx);
        if s > 0.0 {
            let es = s - d;
            l_sur += es.abs();
            n_sur += 1;
            up_surface.data_mut()[idx] = sgn(es);
        }
    }
    if n_d > 0 {
        l_d /= n_d as f64;
        let k = cfg.w_depth / n_d as f64;
        for v in up_depth.data_mut() {
            *v *= k;
        }
    }
    if n_sur > 0 {
        l_sur /= n_sur as f64;
        let k = cfg.w_surface / n_sur as f64;
        for v in up_surface.data_mut() {
            *v *= k;
        }
    }

    let mut grads = render_backward(
        field,
        pose,
        intr,
        render_cfg,
        output,
        &Upstream {
            color: Some(&up_color),
            depth: Some(&up_depth),
            surface_depth: Some(&up_surface),
            transmittance: None,
        },
    )?;

    // Scale regularizers. The threshold depth comes from the deepest
    // qualifying Gaussian; camera z is row 2 of R_cw, i.e. `a` below.
    let r_wc = crate::render::quat_to_mat(
        pose.rotation.quaternion().w,
        pose.rotation.quaternion().i,
        pose.rotation.quaternion().j,
        pose.rotation.quaternion().k,
    );
    let a = Vector3::new(r_wc[0][2], r_wc[1][2], r_wc[2][2]);
    let deepest: Option<(f64, usize)> = match cfg.gamma_scope {
        GammaScope::Visible => {
            let mut best: Option<(f64, usize)> = None;
            for p in &output.projected {
                if p.x_max < 0 || p.y_max < 0 || p.x_min >= w as i64 || p.y_min >= h as i64 {
                    continue;
                }
                if best.map_or(true, |(z, _)| p.z > z) {
                    best = Some((p.z, p.index as usize));
                }
            }
            best
        }
        GammaScope::AllGaussians => {
            let mut best: Option<(f64, usize)> = None;
            for (i, g) in field.gaussians().iter().enumerate() {
                let z = a.dot(&(g.position - pose.translation));
                if best.map_or(true, |(bz, _)| z > bz) {
                    best = Some((z, i));
                }
            }
            best
        }
    };

    let mut iso = 0.0;
    let mut s_reg = 0.0;
    let mut over = 0usize;
    let mut gamma = f64::INFINITY;
    if let Some((zmax, arg)) = deepest {
        gamma = cfg.gamma_coeff * zmax;
        let over_idx: Vec<usize> = field
            .gaussians()
            .iter()
            .enumerate()
            .filter(|(_, g)| g.scale.iter().any(|s| *s > gamma))
            .map(|(i, _)| i)
            .collect();
        over = over_idx.len();
        if over > 0 {
            let n_over = over as f64;
            let mut n_comp = 0usize;
            for &i in &over_idx {
                let s = field.get(i).scale;
                let (mut mx, mut mn) = (0usize, 0usize);
                for c in 1..3 {
                    if s[c] > s[mx] {
                        mx = c;
                    }
                    if s[c] < s[mn] {
                        mn = c;
                    }
                }
                iso += s[mx] - s[mn];
                grads.scale[i][mx] += cfg.w_reg / n_over;
                grads.scale[i][mn] -= cfg.w_reg / n_over;
                for c in 0..3 {
                    if s[c] > gamma {
                        s_reg += s[c] - gamma;
                        grads.scale[i][c] += 2.0 * cfg.w_reg;
                        n_comp += 1;
                    }
                }
            }
            iso /= n_over;
            // every offending component carries a -gamma, so the defining
            // Gaussian's depth picks up the counter-gradient
            let g_z = -2.0 * cfg.w_reg * n_comp as f64 * cfg.gamma_coeff;
            if g_z != 0.0 {
                let x_w = field.get(arg).position;
                grads.position[arg] += a * g_z;
                let dv = -a * g_z;
                let dw = -x_w.cross(&a) * g_z;
                for k in 0..3 {
                    grads.pose[k] += dv[k];
                    grads.pose[3 + k] += dw[k];
                }
            }
        }
    }

    let rgb = cfg.lambda * l1 + (1.0 - cfg.lambda) * (1.0 - ssim_mean);
    let total = cfg.w_rgb * rgb
        + cfg.w_depth * l_d
        + cfg.w_surface * l_sur
        + cfg.w_reg * (iso + 2.0 * s_reg);
    let loss = MappingLoss {
        total,
        rgb,
        color_l1: l1,
        ssim: ssim_mean,
        depth: l_d,
        surface: l_sur,
        iso,
        scale_reg: s_reg,
        gamma,
        over_gamma: over,
    };
    Ok((loss, grads))
}

/// One optimizer step's diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct MapIterationStats {
    pub iteration: usize,
    /// Index into the view list this step rendered.
    pub view: usize,
    pub gaussians: usize,
    pub loss: MappingLoss,
}

/// Runs the iteration budget over `views` round-robin: render, evaluate,
/// step. Zero iterations leave the field untouched.
pub fn optimize_map(
    field: &mut GaussianField,
    views: &[(SE3Pose, &Frame)],
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    cfg: &MappingConfig,
) -> Result<Vec<MapIterationStats>, MappingError> {
    if views.is_empty() {
        return Err(MappingError::NoViews);
    }
    let mut stats = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let view = iteration % views.len();
        let (pose, frame) = &views[view];
        let output = render(field, pose, intr, render_cfg);
        let (loss, grads) = loss_and_gradients(field, pose, intr, render_cfg, &output, frame, cfg)?;
        field.adam_step(&grads, &cfg.lr)?;
        stats.push(MapIterationStats { iteration, view, gaussians: field.len(), loss });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Gaussian;
    use crate::grid::{GrayF32, RgbF32};
    use nalgebra::UnitQuaternion;

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics {
            fx: 30.0,
            fy: 30.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            depth_scale: 5000.0,
        }
    }

    fn gaussian(pos: [f64; 3], scale: [f64; 3], opacity: f64) -> Gaussian {
        Gaussian {
            position: Vector3::new(pos[0], pos[1], pos[2]),
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(scale[0], scale[1], scale[2]),
            opacity,
            color: Vector3::new(0.6, 0.4, 0.3),
        }
    }

    fn flat_frame(w: usize, h: usize) -> Frame {
        Frame::new(0.0, RgbF32::new(w, h, [0.5; 3]), GrayF32::new(w, h, 2.0))
    }

    #[test]
    fn regularizer_hand_case() {
        // one Gaussian 4 m out defines gamma = 0.12; its scale (0.2, 0.05,
        // 0.05) leaves spread 0.15 and a single offending component at 0.08
        let field = GaussianField::from_gaussians(vec![gaussian([0.0, 0.0, 4.0], [0.2, 0.05, 0.05], 0.5)]);
        let intr = intr(16, 12);
        let pose = SE3Pose::identity();
        let rcfg = RenderConfig::default();
        let out = render(&field, &pose, &intr, &rcfg);
        let mut cfg = MappingConfig::default();
        cfg.w_rgb = 0.0;
        cfg.w_depth = 0.0;
        cfg.w_surface = 0.0;
        let (loss, grads) =
            loss_and_gradients(&field, &pose, &intr, &rcfg, &out, &flat_frame(16, 12), &cfg).unwrap();
        assert!((loss.gamma - 0.12).abs() < 1e-12);
        assert_eq!(loss.over_gamma, 1);
        assert!((loss.iso - 0.15).abs() < 1e-12);
        assert!((loss.scale_reg - 0.08).abs() < 1e-12);
        assert!((loss.total - 5.0 * (0.15 + 2.0 * 0.08)).abs() < 1e-10);
        // spread pulls the max down, the offending component adds 2x more
        assert!((grads.scale[0][0] - (5.0 + 10.0)).abs() < 1e-9);
        assert!((grads.scale[0][1] + 5.0).abs() < 1e-9);
        assert_eq!(grads.scale[0][2], 0.0);
        // gamma chain: one offending component, head-on camera
        assert!((grads.position[0].z + 0.3).abs() < 1e-12);
        assert!((grads.pose[2] - 0.3).abs() < 1e-12);
        assert!(grads.pose[5].abs() < 1e-12);
    }

    #[test]
    fn perfect_reproduction_scores_near_zero() {
        let field = GaussianField::from_gaussians(vec![
            gaussian([0.0, 0.0, 2.0], [0.05, 0.05, 0.05], 0.9),
            gaussian([0.3, 0.1, 2.2], [0.04, 0.05, 0.03], 0.8),
            gaussian([-0.2, -0.1, 1.8], [0.02, 0.03, 0.04], 0.7),
        ]);
        let intr = intr(24, 18);
        let pose = SE3Pose::identity();
        let rcfg = RenderConfig::default();
        let out = render(&field, &pose, &intr, &rcfg);
        // feed the render back as its own supervision (f32 casts add noise);
        // the sensor depth channel can match either blended or surface depth,
        // not both, so check each against its own term
        let frame = Frame::new(0.0, out.color.to_f32(), out.depth.map(|v| v as f32));
        let mut cfg = MappingConfig::default();
        cfg.w_surface = 0.0;
        let (loss, _) = loss_and_gradients(&field, &pose, &intr, &rcfg, &out, &frame, &cfg).unwrap();
        assert!(loss.color_l1 < 1e-6, "l1 {}", loss.color_l1);
        assert!(loss.ssim > 0.99999);
        assert!(loss.depth < 1e-6);
        // all scales sit below gamma = 0.03 * max z, so the regularizers
        // vanish exactly
        assert_eq!(loss.iso, 0.0);
        assert_eq!(loss.scale_reg, 0.0);
        assert!(loss.total < 1e-4);

        let frame = Frame::new(0.0, out.color.to_f32(), out.surface_depth.map(|v| v as f32));
        let (loss, _) = loss_and_gradients(&field, &pose, &intr, &rcfg, &out, &frame, &cfg).unwrap();
        assert!(loss.surface < 1e-6, "surface {}", loss.surface);
    }

    #[test]
    fn empty_view_list_is_refused_and_zero_iterations_do_nothing() {
        let mut field = GaussianField::from_gaussians(vec![gaussian([0.0, 0.0, 2.0], [0.05; 3], 0.9)]);
        let intr = intr(16, 12);
        let frame = flat_frame(16, 12);
        let views: Vec<(SE3Pose, &Frame)> = vec![];
        let cfg = MappingConfig::default();
        assert!(matches!(
            optimize_map(&mut field, &views, &intr, &RenderConfig::default(), &cfg),
            Err(MappingError::NoViews)
        ));

        let before = *field.get(0);
        let gen = field.generation();
        let mut zero = cfg.clone();
        zero.iterations = 0;
        let views = vec![(SE3Pose::identity(), &frame)];
        let stats = optimize_map(&mut field, &views, &intr, &RenderConfig::default(), &zero).unwrap();
        assert!(stats.is_empty());
        assert_eq!(field.generation(), gen);
        assert_eq!(*field.get(0), before);
    }

    #[test]
    fn pure_regularizer_descent_reduces_anisotropy() {
        let mut field = GaussianField::from_gaussians(vec![
            gaussian([0.0, 0.0, 2.0], [0.4, 0.02, 0.1], 0.9),
            gaussian([0.2, 0.1, 2.4], [0.3, 0.05, 0.05], 0.8),
        ]);
        let intr = intr(16, 12);
        let frame = flat_frame(16, 12);
        let mut cfg = MappingConfig::default();
        cfg.w_rgb = 0.0;
        cfg.w_depth = 0.0;
        cfg.w_surface = 0.0;
        cfg.iterations = 50;
        let ratio = |f: &GaussianField| {
            (0..f.len())
                .map(|i| {
                    let s = f.get(i).scale;
                    s.max() / s.min()
                })
                .fold(0.0f64, f64::max)
        };
        let before = ratio(&field);
        let views = vec![(SE3Pose::identity(), &frame)];
        optimize_map(&mut field, &views, &intr, &RenderConfig::default(), &cfg).unwrap();
        let after = ratio(&field);
        assert!(after < before, "anisotropy {before} -> {after}");
    }
}
