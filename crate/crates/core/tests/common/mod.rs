//! Helpers shared by the integration suites: seeded mapping scenes with
//! finite-difference safety margins, and a central-difference comparer for
//! the full mapping objective (photometric, depth, surface, regularizers).
//!
//! Nothing here calls the backward pass: finite differences go through the
//! public forward path only, so the two sides stay independent.

#![allow(dead_code)]

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatrack_core::features::{Descriptor, FeatureSet, Keypoint};
use splatrack_core::field::{Gaussian, GaussianField};
use splatrack_core::geometry::{se3_exp, Intrinsics, SE3Pose, Twist};
use splatrack_core::grid::{GrayF32, RgbF32};
use splatrack_core::mapping::{loss_and_gradients, MappingConfig, MappingLoss};
use splatrack_core::render::{render, RenderConfig};
use splatrack_core::seq::Frame;
use splatrack_core::tracking::{track_loss_and_pose_gradient, Landmark, LandmarkMatch, TrackingConfig};

pub struct MapScene {
    pub field: GaussianField,
    pub pose: SE3Pose,
    pub intr: Intrinsics,
    pub frame: Frame,
    pub rcfg: RenderConfig,
    pub mcfg: MappingConfig,
}

pub fn square_intrinsics(size: usize) -> Intrinsics {
    Intrinsics {
        fx: 1.9 * size as f64,
        fy: 1.9 * size as f64,
        cx: 0.5 * size as f64,
        cy: 0.5 * size as f64,
        width: size,
        height: size,
        depth_scale: 5000.0,
    }
}

/// Three scale components clear of each other (max/min picks stay put) and of
/// `cap` (threshold membership stays put) under +-1e-4 perturbations.
fn sample_scale(rng: &mut ChaCha8Rng, cap: f64) -> Vector3<f64> {
    loop {
        let c = [
            rng.gen_range(0.02..0.17),
            rng.gen_range(0.02..0.17),
            rng.gen_range(0.02..0.17),
        ];
        let near_cap = c.iter().any(|v| (v - cap).abs() < 2e-3);
        let near_tie = (c[0] - c[1]).abs() < 3e-3
            || (c[0] - c[2]).abs() < 3e-3
            || (c[1] - c[2]).abs() < 3e-3;
        if !near_cap && !near_tie {
            return Vector3::new(c[0], c[1], c[2]);
        }
    }
}

/// Seeded mapping scene: Gaussians with separated depths and scale
/// components, plus a supervision frame whose color and depth targets sit a
/// safe margin away from every L1 kink and validity gate in the loss. Every
/// seventh pixel gets a zero sensor depth so the gates are exercised too.
pub fn build_map_scene(seed: u64, size: usize, n: usize) -> MapScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = square_intrinsics(size);
    let delta: Twist = Twist::from_fn(|i, _| {
        if i < 3 {
            rng.gen_range(-0.05..0.05)
        } else {
            rng.gen_range(-0.03..0.03)
        }
    });
    let pose = se3_exp(&delta);

    // Depths spread out so the blend sort and the deepest-Gaussian pick for
    // the scale threshold cannot flip under perturbation.
    let depths: Vec<f64> = (0..n)
        .map(|i| 1.2 + 0.35 * i as f64 + rng.gen_range(0.0..0.1))
        .collect();
    let z_max = depths.iter().copied().fold(0.0, f64::max);
    let mcfg = MappingConfig::default();
    let scale_cap = mcfg.gamma_coeff * z_max;

    let mut gaussians = Vec::with_capacity(n);
    for &z in &depths {
        let px = rng.gen_range(0.25 * size as f64..0.75 * size as f64);
        let py = rng.gen_range(0.25 * size as f64..0.75 * size as f64);
        let cam = intr.backproject(px, py, z).unwrap();
        let rotation = UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        gaussians.push(Gaussian {
            position: pose.transform_point(&cam),
            rotation,
            scale: sample_scale(&mut rng, scale_cap),
            opacity: rng.gen_range(0.15..0.85),
            color: Vector3::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            ),
        });
    }

    let field = GaussianField::from_gaussians(gaussians);
    let rcfg = RenderConfig::default().exhaustive();
    let out = render(&field, &pose, &intr, &rcfg);

    let mut color = RgbF32::new(size, size, [0.0; 3]);
    let mut depth = GrayF32::new(size, size, 0.0);
    for idx in 0..size * size {
        let c = out.color.at(idx);
        let mut target = [0.0f32; 3];
        for (ch, t) in target.iter_mut().enumerate() {
            // Offset toward the [0,1] interior: a guaranteed margin of at
            // least 0.05 from the photometric L1 kink.
            let m = rng.gen_range(0.05..0.30);
            *t = if c[ch] > 0.5 { (c[ch] - m) as f32 } else { (c[ch] + m) as f32 };
        }
        color.data_mut()[idx] = target;

        if idx % 7 == 3 {
            continue; // invalid sensor depth, exercises the validity gates
        }
        let blended = out.depth.at(idx);
        let surface = out.surface_depth.at(idx);
        let mut picked = None;
        'search: for k in 0..40 {
            let m = 0.08 + 0.07 * k as f64;
            for sign in [1.0, -1.0] {
                let cand = blended + sign * m;
                if cand > 0.1 && (cand - surface).abs() > 0.06 {
                    picked = Some(cand);
                    break 'search;
                }
            }
        }
        depth.data_mut()[idx] = picked.expect("margin search terminates") as f32;
    }

    let frame = Frame::new(0.0, color, depth);
    MapScene { field, pose, intr, frame, rcfg, mcfg }
}

/// True when no +-h perturbation can reorder the blend, flip a surface pick
/// at transmittance 0.5, or reach the opacity clamp. The supervision targets
/// carry their margins by construction.
pub fn map_fd_safe(scene: &MapScene) -> bool {
    let out = render(&scene.field, &scene.pose, &scene.intr, &scene.rcfg);
    let mut zs: Vec<f64> = out.projected.iter().map(|p| p.z).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if zs.windows(2).any(|w| w[1] - w[0] <= 1e-2) {
        return false;
    }
    let n_px = scene.intr.width * scene.intr.height;
    (0..n_px).all(|idx| {
        out.records.pixel(idx).iter().all(|rec| {
            (rec.transmittance - 0.5).abs() > 2e-3 && rec.alpha < scene.rcfg.alpha_clamp - 1e-3
        })
    })
}

/// First `count` FD-safe scenes from a deterministic seed scan.
pub fn safe_map_scenes(count: usize, size: usize, n: usize) -> Vec<MapScene> {
    (0u64..10_000)
        .map(|seed| build_map_scene(seed, size, n))
        .filter(map_fd_safe)
        .take(count)
        .collect()
}

pub fn map_loss_at(scene: &MapScene, field: &GaussianField, pose: &SE3Pose) -> MappingLoss {
    let out = render(field, pose, &scene.intr, &scene.rcfg);
    let (loss, _) =
        loss_and_gradients(field, pose, &scene.intr, &scene.rcfg, &out, &scene.frame, &scene.mcfg)
            .expect("scene is well formed");
    loss
}

const H: f64 = 1e-4;

fn rel_check(label: &str, analytic: f64, fd: f64) -> Result<(), String> {
    let scale = analytic.abs().max(fd.abs());
    if scale > 1e-7 {
        let rel = (analytic - fd).abs() / scale;
        if rel >= 1e-3 {
            return Err(format!("{label}: analytic {analytic:e} vs fd {fd:e} (rel {rel:e})"));
        }
    } else if (analytic - fd).abs() >= 1e-9 {
        return Err(format!("{label}: analytic {analytic:e} vs fd {fd:e}"));
    }
    Ok(())
}

pub struct TrackScene {
    pub field: GaussianField,
    pub pose: SE3Pose,
    pub intr: Intrinsics,
    pub frame: Frame,
    pub rcfg: RenderConfig,
    pub tcfg: TrackingConfig,
    pub landmarks: Vec<Landmark>,
    pub features: FeatureSet,
    pub matches: Vec<LandmarkMatch>,
}

/// Seeded tracking scene: a wall of fat opaque Gaussians so the coverage
/// mask is solid over the interior, plus landmark matches with residuals
/// spread on both sides of the Huber threshold. Supervision targets carry
/// the same kink margins as the mapping scenes.
pub fn build_track_scene(seed: u64, size: usize) -> TrackScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = square_intrinsics(size);
    let delta: Twist = Twist::from_fn(|i, _| {
        if i < 3 {
            rng.gen_range(-0.05..0.05)
        } else {
            rng.gen_range(-0.03..0.03)
        }
    });
    let pose = se3_exp(&delta);

    // Overlapping opaque blobs over the central region only, leaving the
    // border uncovered so the gate has something to exclude; depths strictly
    // separated so the blend order cannot flip under perturbation.
    let lo = 0.14 * size as f64;
    let hi = 0.86 * size as f64;
    let step = (hi - lo) / 5.0;
    let mut gaussians = Vec::new();
    let mut i = 0;
    for iy in 0..6 {
        let py = lo + iy as f64 * step;
        for ix in 0..6 {
            let px = lo + ix as f64 * step;
            let z = 1.8 + 0.022 * i as f64 + rng.gen_range(0.0..0.008);
            let cam = intr.backproject(px, py, z).unwrap();
            // wide overlap pushes interior coverage far above the mask gate,
            // keeping the gate band off the wall's plateau
            let s = 1.25 * step / intr.fx * z;
            gaussians.push(Gaussian {
                position: pose.transform_point(&cam),
                rotation: UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )),
                scale: Vector3::new(s, s, 0.3 * s),
                opacity: rng.gen_range(0.96..0.985),
                color: Vector3::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                ),
            });
            i += 1;
        }
    }
    assert_eq!(gaussians.len(), 36);

    let field = GaussianField::from_gaussians(gaussians);
    let rcfg = RenderConfig::default().exhaustive();
    let out = render(&field, &pose, &intr, &rcfg);

    let mut color = RgbF32::new(size, size, [0.0; 3]);
    let mut depth = GrayF32::new(size, size, 0.0);
    for idx in 0..size * size {
        let c = out.color.at(idx);
        let mut target = [0.0f32; 3];
        for (ch, t) in target.iter_mut().enumerate() {
            let m = rng.gen_range(0.05..0.30);
            *t = if c[ch] > 0.5 { (c[ch] - m) as f32 } else { (c[ch] + m) as f32 };
        }
        color.data_mut()[idx] = target;

        if idx % 7 == 3 {
            continue; // invalid sensor depth, exercises the validity gate
        }
        let blended = out.depth.at(idx);
        let surface = out.surface_depth.at(idx);
        let mut picked = None;
        'search: for k in 0..40 {
            let m = 0.08 + 0.07 * k as f64;
            for sign in [1.0, -1.0] {
                let cand = blended + sign * m;
                if cand > 0.1 && (cand - surface).abs() > 0.06 {
                    picked = Some(cand);
                    break 'search;
                }
            }
        }
        depth.data_mut()[idx] = picked.expect("margin search terminates") as f32;
    }
    let frame = Frame::new(0.0, color, depth);

    // Landmark matches with scale-normalized residual magnitudes well away
    // from both zero and the Huber threshold.
    let mut landmarks = Vec::new();
    let mut features = FeatureSet::default();
    let mut matches = Vec::new();
    for j in 0..8 {
        let u = rng.gen_range(0.15 * size as f64..0.85 * size as f64);
        let v = rng.gen_range(0.15 * size as f64..0.85 * size as f64);
        let d = rng.gen_range(1.5..3.0);
        let pw = pose.transform_point(&intr.backproject(u, v, d).unwrap());
        let level = rng.gen_range(0u8..3);
        let sigma = 1.2f64.powi(level as i32);
        let e = [1.2, 1.8, 3.2, 4.1][j % 4];
        let ang = j as f64 * 0.7;
        let obs = Vector2::new(u, v) + Vector2::new(ang.cos(), ang.sin()) * (e * sigma);
        features.keypoints.push(Keypoint { position: obs, response: 1.0, orientation: 0.0, level });
        features.descriptors.push(Descriptor([j as u64; 4]));
        features.depths.push(d as f32);
        landmarks.push(Landmark::new(pw, 0, j, Descriptor([j as u64; 4])));
        matches.push(LandmarkMatch { landmark: j, keypoint: j });
    }

    TrackScene {
        field,
        pose,
        intr,
        frame,
        rcfg,
        tcfg: TrackingConfig::default(),
        landmarks,
        features,
        matches,
    }
}

/// FD safety for the tracking objective. The wall scenes stack opaque
/// Gaussians, so their transmittance drops steeply and some pixel usually
/// sits near the 0.5 surface crossing; the checker therefore runs at
/// `H_TRACK` = 1e-7 where 1e-4 margins carry ~100x headroom, instead of the
/// mapping suite's 1e-4 step. The coverage mask must be stable against the
/// gate, non-empty, and not wall-to-wall.
pub fn track_fd_safe(scene: &TrackScene) -> bool {
    let out = render(&scene.field, &scene.pose, &scene.intr, &scene.rcfg);
    let mut zs: Vec<f64> = out.projected.iter().map(|p| p.z).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if zs.windows(2).any(|w| w[1] - w[0] <= 1e-2) {
        return false;
    }
    let n_px = scene.intr.width * scene.intr.height;
    let records_safe = (0..n_px).all(|idx| {
        out.records.pixel(idx).iter().all(|rec| {
            (rec.transmittance - 0.5).abs() > 1e-4 && rec.alpha < scene.rcfg.alpha_clamp - 1e-3
        })
    });
    if !records_safe {
        return false;
    }
    let gate = scene.tcfg.gate;
    let mut masked = 0usize;
    for idx in 0..n_px {
        let t = out.transmittance.at(idx);
        if (t - gate).abs() < 1e-4 {
            return false;
        }
        if t > gate {
            masked += 1;
        }
    }
    masked * 4 >= n_px && masked * 10 <= n_px * 9
}

/// First `count` FD-safe tracking scenes from a deterministic seed scan.
pub fn safe_track_scenes(count: usize, size: usize) -> Vec<TrackScene> {
    (0u64..10_000)
        .map(|seed| build_track_scene(seed, size))
        .filter(track_fd_safe)
        .take(count)
        .collect()
}

pub fn track_loss_at(scene: &TrackScene, pose: &SE3Pose) -> f64 {
    let (loss, _) = track_loss_and_pose_gradient(
        &scene.field,
        pose,
        &scene.intr,
        &scene.rcfg,
        &scene.frame,
        &scene.landmarks,
        &scene.features,
        &scene.matches,
        &scene.tcfg,
    )
    .expect("scene is well formed");
    loss.total
}

const H_TRACK: f64 = 1e-7;

/// Central-difference check of the masked tracking objective's pose gradient.
pub fn check_track_pose_gradient(scene: &TrackScene) -> Result<(), String> {
    let (_, grad) = track_loss_and_pose_gradient(
        &scene.field,
        &scene.pose,
        &scene.intr,
        &scene.rcfg,
        &scene.frame,
        &scene.landmarks,
        &scene.features,
        &scene.matches,
        &scene.tcfg,
    )
    .map_err(|e| e.to_string())?;
    for k in 0..6 {
        let eval = |d: f64| {
            let mut tw = Twist::zeros();
            tw[k] = d;
            track_loss_at(scene, &scene.pose.retract(&tw))
        };
        let fd = (eval(H_TRACK) - eval(-H_TRACK)) / (2.0 * H_TRACK);
        rel_check(&format!("pose[{k}]"), grad[k], fd)?;
    }
    Ok(())
}

/// Central-difference check of the full mapping objective's gradients for
/// every Gaussian parameter and the six pose axes. Returns the first failure.
pub fn check_map_gradients(scene: &MapScene) -> Result<(), String> {
    let out = render(&scene.field, &scene.pose, &scene.intr, &scene.rcfg);
    let (_, grads) = loss_and_gradients(
        &scene.field,
        &scene.pose,
        &scene.intr,
        &scene.rcfg,
        &out,
        &scene.frame,
        &scene.mcfg,
    )
    .map_err(|e| e.to_string())?;

    let fd_field = |mutate: &dyn Fn(&mut Gaussian, f64), i: usize| -> f64 {
        let eval = |d: f64| {
            let mut field = scene.field.clone();
            mutate(field.get_mut(i), d);
            map_loss_at(scene, &field, &scene.pose).total
        };
        (eval(H) - eval(-H)) / (2.0 * H)
    };

    for i in 0..scene.field.len() {
        for axis in 0..3 {
            let fd = fd_field(&|g, d| g.position[axis] += d, i);
            rel_check(&format!("g{i} position[{axis}]"), grads.position[i][axis], fd)?;

            let fd = fd_field(&|g, d| g.scale[axis] += d, i);
            rel_check(&format!("g{i} scale[{axis}]"), grads.scale[i][axis], fd)?;

            let fd = fd_field(&|g, d| g.color[axis] += d, i);
            rel_check(&format!("g{i} color[{axis}]"), grads.color[i][axis], fd)?;
        }
        for (slot, name) in [(0usize, "w"), (1, "x"), (2, "y"), (3, "z")] {
            let fd = fd_field(
                &|g, d| {
                    let q = g.rotation.quaternion();
                    let mut c = [q.w, q.i, q.j, q.k];
                    c[slot] += d;
                    g.rotation =
                        UnitQuaternion::new_unchecked(Quaternion::new(c[0], c[1], c[2], c[3]));
                },
                i,
            );
            rel_check(&format!("g{i} quat {name}"), grads.rotation[i][slot], fd)?;
        }
        let fd = fd_field(&|g, d| g.opacity += d, i);
        rel_check(&format!("g{i} opacity"), grads.opacity[i], fd)?;
    }

    for k in 0..6 {
        let eval = |d: f64| {
            let mut tw = Twist::zeros();
            tw[k] = d;
            map_loss_at(scene, &scene.field, &scene.pose.retract(&tw)).total
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        rel_check(&format!("pose[{k}]"), grads.pose[k], fd)?;
    }
    Ok(())
}
