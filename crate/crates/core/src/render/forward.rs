//! Forward rasterization: project, depth-sort, blend front to back.

use super::project::{mahalanobis, project_with_frame, CameraFrame, ProjectedGaussian};
use super::{BlendList, BlendRecord, RenderConfig, RenderOutput};
use crate::field::GaussianField;
use crate::geometry::{Intrinsics, SE3Pose};
use crate::grid::{GrayF64, RgbF64};
use rayon::prelude::*;

pub(crate) fn project_all(
    field: &GaussianField,
    cam: &CameraFrame,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = field
        .gaussians()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_with_frame(g, i as u32, cam, intr, cfg))
        .collect();
    // global front-to-back order; index breaks depth ties deterministically
    projected.sort_unstable_by(|a, b| (a.z, a.index).partial_cmp(&(b.z, b.index)).unwrap());
    projected
}

struct RowResult {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    surface: Vec<f64>,
    trans: Vec<f64>,
    records: Vec<BlendRecord>,
    counts: Vec<u32>,
}

/// Renders the field from a camera-to-world `pose`.
pub fn render(field: &GaussianField, pose: &SE3Pose, intr: &Intrinsics, cfg: &RenderConfig) -> RenderOutput {
    let cam = CameraFrame::from_pose(pose);
    let projected = project_all(field, &cam, intr, cfg);
    let (w, h) = (intr.width, intr.height);

    // Row buckets preserve the global sort order per row.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (k, p) in projected.iter().enumerate() {
        let y0 = p.y_min.max(0);
        let y1 = p.y_max.min(h as i64 - 1);
        for y in y0..=y1 {
            rows[y as usize].push(k as u32);
        }
    }

    let row_results: Vec<RowResult> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = RowResult {
                color: vec![[0.0; 3]; w],
                depth: vec![0.0; w],
                surface: vec![0.0; w],
                trans: vec![0.0; w],
                records: Vec::new(),
                counts: vec![0; w],
            };
            let py = y as f64;
            for x in 0..w {
                let px = x as f64;
                let mut t = 1.0f64;
                let mut acc_c = [0.0f64; 3];
                let mut acc_d = 0.0f64;
                let mut acc_t = 0.0f64;
                let mut surf = 0.0f64;
                let mut n_rec = 0u32;
                for &k in &rows[y] {
                    if t < cfg.early_stop {
                        break;
                    }
                    let p = &projected[k as usize];
                    if (x as i64) < p.x_min || (x as i64) > p.x_max {
                        continue;
                    }
                    let dx = px - p.mean[0];
                    let dy = py - p.mean[1];
                    let maha = mahalanobis(dx, dy, &p.cov_inv);
                    if maha > cfg.cutoff_sigma * cfg.cutoff_sigma {
                        continue;
                    }
                    let gval = (-0.5 * maha).exp();
                    let g = field.get(p.index as usize);
                    let alpha_raw = g.opacity * gval;
                    let alpha = if alpha_raw < cfg.alpha_clamp { alpha_raw } else { cfg.alpha_clamp };
                    if alpha <= 0.0 {
                        continue;
                    }
                    let wgt = alpha * t;
                    acc_c[0] += g.color.x * wgt;
                    acc_c[1] += g.color.y * wgt;
                    acc_c[2] += g.color.z * wgt;
                    acc_d += p.z * wgt;
                    acc_t += wgt;
                    if t > 0.5 {
                        surf = p.z;
                    }
                    out.records.push(BlendRecord { projected: k, alpha, transmittance: t });
                    n_rec += 1;
                    t *= 1.0 - alpha;
                }
                out.color[x] = acc_c;
                out.depth[x] = acc_d;
                out.surface[x] = surf;
                out.trans[x] = acc_t;
                out.counts[x] = n_rec;
            }
            out
        })
        .collect();

    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut surface = Vec::with_capacity(w * h);
    let mut trans = Vec::with_capacity(w * h);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut records = Vec::new();
    offsets.push(0u32);
    let mut total = 0u32;
    for r in row_results {
        color.extend_from_slice(&r.color);
        depth.extend_from_slice(&r.depth);
        surface.extend_from_slice(&r.surface);
        trans.extend_from_slice(&r.trans);
        records.extend_from_slice(&r.records);
        for c in r.counts {
            total += c;
            offsets.push(total);
        }
    }

    RenderOutput {
        color: RgbF64::from_vec(w, h, color),
        depth: GrayF64::from_vec(w, h, depth),
        surface_depth: GrayF64::from_vec(w, h, surface),
        transmittance: GrayF64::from_vec(w, h, trans),
        records: BlendList { offsets, records },
        projected,
        generation: field.generation(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Gaussian;
    use nalgebra::{UnitQuaternion, Vector3};

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            depth_scale: 5000.0,
        }
    }

    fn pixel_gaussian(intr: &Intrinsics, px: f64, py: f64, z: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        // center exactly on the pixel ray so exp(-0) = 1 there
        let dir = intr.backproject(px, py, z).unwrap();
        Gaussian {
            position: dir,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(0.5, 0.5, 0.5),
            opacity,
            color: Vector3::new(color[0], color[1], color[2]),
        }
    }

    #[test]
    fn empty_field_renders_zeros() {
        let k = intr(8, 6);
        let out = render(&GaussianField::new(), &SE3Pose::identity(), &k, &RenderConfig::default());
        assert!(out.color.data().iter().all(|c| *c == [0.0; 3]));
        assert!(out.depth.data().iter().all(|d| *d == 0.0));
        assert!(out.surface_depth.data().iter().all(|d| *d == 0.0));
        assert!(out.transmittance.data().iter().all(|t| *t == 0.0));
        assert!(out.records.records.is_empty());
    }

    #[test]
    fn two_gaussian_blend_matches_hand_computation() {
        // alpha 0.6 at depths 1 and 2 on the same ray:
        // C = 0.6 c1 + 0.24 c2, D = 0.6 + 0.48 = 1.08, Ts = 0.84, Ds = 1.
        let k = intr(16, 16);
        let mut f = GaussianField::new();
        f.spawn(pixel_gaussian(&k, 8.0, 8.0, 2.0, 0.6, [0.0, 1.0, 0.0]));
        f.spawn(pixel_gaussian(&k, 8.0, 8.0, 1.0, 0.6, [1.0, 0.0, 0.0]));
        let out = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default());
        let c = out.color.get(8, 8);
        assert!((c[0] - 0.6).abs() < 1e-12, "front color weight");
        assert!((c[1] - 0.24).abs() < 1e-12, "rear color weight");
        assert!((out.depth.get(8, 8) - 1.08).abs() < 1e-12);
        assert!((out.transmittance.get(8, 8) - 0.84).abs() < 1e-12);
        assert!((out.surface_depth.get(8, 8) - 1.0).abs() < 1e-12);
        // records are front-to-back despite reversed spawn order
        let recs = out.records.pixel(8 * 16 + 8);
        assert_eq!(recs.len(), 2);
        assert!(out.projected[recs[0].projected as usize].z < out.projected[recs[1].projected as usize].z);
        assert_eq!(recs[0].transmittance, 1.0);
        assert!((recs[1].transmittance - 0.4).abs() < 1e-12);
    }

    #[test]
    fn opaque_gaussian_saturates_at_alpha_clamp() {
        let k = intr(16, 16);
        let mut f = GaussianField::new();
        f.spawn(pixel_gaussian(&k, 8.0, 8.0, 1.0, 1.0, [1.0, 0.0, 0.0]));
        let out = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default());
        assert!((out.color.get(8, 8)[0] - 0.999).abs() < 1e-15);
        assert!((out.transmittance.get(8, 8) - 0.999).abs() < 1e-15);
        assert!((out.surface_depth.get(8, 8) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transmittance_identity_holds() {
        // Ts accumulated explicitly must equal 1 - prod(1 - alpha_i) closely.
        let k = intr(32, 32);
        let mut f = GaussianField::new();
        for i in 0..40 {
            let px = 8.0 + (i % 8) as f64 * 2.0;
            let py = 6.0 + (i % 10) as f64 * 2.0;
            f.spawn(pixel_gaussian(&k, px, py, 1.0 + i as f64 * 0.1, 0.3 + 0.01 * i as f64, [0.5, 0.5, 0.5]));
        }
        let out = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default().exhaustive());
        for idx in 0..(32 * 32) {
            let mut t = 1.0;
            for r in out.records.pixel(idx) {
                t *= 1.0 - r.alpha;
            }
            assert!((out.transmittance.at(idx) - (1.0 - t)).abs() < 1e-6);
            assert!(out.transmittance.at(idx) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn early_termination_stops_recording() {
        let k = intr(8, 8);
        let mut f = GaussianField::new();
        for i in 0..30 {
            f.spawn(pixel_gaussian(&k, 4.0, 4.0, 1.0 + 0.1 * i as f64, 0.95, [1.0, 1.0, 1.0]));
        }
        let with_stop = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default());
        let without = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default().exhaustive());
        let pix = 4 * 8 + 4;
        assert!(with_stop.records.pixel(pix).len() < without.records.pixel(pix).len());
        // every recorded pre-blend transmittance respects the floor
        for r in with_stop.records.pixel(pix) {
            assert!(r.transmittance >= RenderConfig::default().early_stop);
        }
    }

    #[test]
    fn behind_camera_gaussians_are_culled() {
        let k = intr(8, 8);
        let mut f = GaussianField::new();
        f.spawn(pixel_gaussian(&k, 4.0, 4.0, 1.0, 0.5, [1.0, 0.0, 0.0]));
        let mut behind = pixel_gaussian(&k, 4.0, 4.0, 1.0, 0.9, [0.0, 1.0, 0.0]);
        behind.position.z = -2.0;
        f.spawn(behind);
        let out = render(&f, &SE3Pose::identity(), &k, &RenderConfig::default());
        assert_eq!(out.projected.len(), 1);
        assert!(out.color.get(4, 4)[1] < 1e-15);
    }
}
