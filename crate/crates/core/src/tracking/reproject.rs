//! Motion-only pose estimation from landmark reprojections.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix6, Vector2, Vector3, Vector6};

use super::{level_variance, Landmark, LandmarkMatch, TrackingConfig, MAX_ROUNDS, MIN_INLIERS};
use crate::features::FeatureSet;
use crate::geometry::se3::skew;
use crate::geometry::{Intrinsics, SE3Pose};

/// Camera-frame points closer than this are geometrically unusable.
const NEAR_Z: f64 = 1e-4;
const GN_ITERATIONS: usize = 10;
const GN_STEP_TOLERANCE: f64 = 1e-12;

pub(crate) struct Reprojection {
    /// Predicted pixel minus observed pixel.
    pub residual: Vector2<f64>,
    /// Residual sensitivity to a left-multiplicative increment on the
    /// camera-to-world pose, twist ordered `[v, w]`.
    pub jacobian: Matrix2x6<f64>,
    /// Measurement variance of the observation's pyramid level.
    pub variance: f64,
}

/// Projects a landmark through `pose_inv` (world to camera) and differentiates
/// against the pose. `None` when the point sits on or behind the camera plane.
pub(crate) fn reproject(
    pose_inv: &SE3Pose,
    r_cw: &Matrix3<f64>,
    point: &Vector3<f64>,
    observed: &Vector2<f64>,
    level: u8,
    intr: &Intrinsics,
) -> Option<Reprojection> {
    let pc = pose_inv.transform_point(point);
    if pc.z <= NEAR_Z {
        return None;
    }
    let inv_z = 1.0 / pc.z;
    let residual = Vector2::new(
        intr.fx * pc.x * inv_z + intr.cx - observed.x,
        intr.fy * pc.y * inv_z + intr.cy - observed.y,
    );
    let dpi = Matrix2x3::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * pc.x * inv_z * inv_z,
        0.0,
        intr.fy * inv_z,
        -intr.fy * pc.y * inv_z * inv_z,
    );
    // For T_wc <- exp(d) T_wc the camera point moves by
    // dX_c/dv = -R_cw and dX_c/dw = R_cw [X_w]x.
    let mut jacobian = Matrix2x6::zeros();
    jacobian.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * (-r_cw)));
    jacobian.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * r_cw * skew(point)));
    Some(Reprojection { residual, jacobian, variance: level_variance(level) })
}

/// IRLS weight for a scale-normalized residual magnitude.
pub(crate) fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// Result of the motion-only stage.
pub struct PoseInit {
    pub pose: SE3Pose,
    /// Matches that survived the final chi-square classification.
    pub inliers: Vec<LandmarkMatch>,
    /// Too few inliers to trust the solution. The caller should fall back to
    /// the predicted pose and consider forcing a keyframe.
    pub weak: bool,
    pub rounds: usize,
}

/// Refines `start` by minimizing Huber-weighted reprojection error over the
/// matched landmarks, alternating Gauss-Newton with chi-square
/// reclassification for up to four rounds. Observations are weighted by the
/// inverse variance of their pyramid level.
pub fn initial_pose(
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    start: &SE3Pose,
    intr: &Intrinsics,
    cfg: &TrackingConfig,
) -> PoseInit {
    let mut pose = *start;
    if matches.len() < MIN_INLIERS {
        return PoseInit { pose, inliers: matches.to_vec(), weak: true, rounds: 0 };
    }
    let mut active = matches.to_vec();
    let mut rounds = 0;
    for _ in 0..MAX_ROUNDS {
        rounds += 1;
        optimize(&mut pose, landmarks, features, &active, intr, cfg);
        // Reclassify against the full match set so residuals redeemed by the
        // refined pose are readmitted.
        let inliers = classify(landmarks, features, matches, &pose, intr, cfg);
        let unchanged = inliers == active;
        active = inliers;
        if active.len() < MIN_INLIERS {
            return PoseInit { pose, inliers: active, weak: true, rounds };
        }
        if unchanged {
            break;
        }
    }
    PoseInit { pose, inliers: active, weak: false, rounds }
}

/// Keeps the matches whose squared scale-normalized reprojection residual is
/// within the chi-square cutoff at `pose`. A zero residual always survives;
/// points behind the camera never do.
pub fn remove_outliers(
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    pose: &SE3Pose,
    intr: &Intrinsics,
    cfg: &TrackingConfig,
) -> Vec<LandmarkMatch> {
    classify(landmarks, features, matches, pose, intr, cfg)
}

fn classify(
    landmarks: &[Landmark],
    features: &FeatureSet,
    matches: &[LandmarkMatch],
    pose: &SE3Pose,
    intr: &Intrinsics,
    cfg: &TrackingConfig,
) -> Vec<LandmarkMatch> {
    let inv = pose.inverse();
    let r_cw = inv.rotation_matrix();
    matches
        .iter()
        .filter(|m| {
            let kp = &features.keypoints[m.keypoint];
            reproject(&inv, &r_cw, &landmarks[m.landmark].position, &kp.position, kp.level, intr)
                .map_or(false, |rp| rp.residual.norm_squared() / rp.variance <= cfg.chi2)
        })
        .copied()
        .collect()
}

fn optimize(
    pose: &mut SE3Pose,
    landmarks: &[Landmark],
    features: &FeatureSet,
    active: &[LandmarkMatch],
    intr: &Intrinsics,
    cfg: &TrackingConfig,
) {
    for _ in 0..GN_ITERATIONS {
        let inv = pose.inverse();
        let r_cw = inv.rotation_matrix();
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        let mut used = 0;
        for m in active {
            let kp = &features.keypoints[m.keypoint];
            let Some(rp) =
                reproject(&inv, &r_cw, &landmarks[m.landmark].position, &kp.position, kp.level, intr)
            else {
                continue;
            };
            let e = (rp.residual.norm_squared() / rp.variance).sqrt();
            let w = huber_weight(e, cfg.huber_delta) / rp.variance;
            let jt = rp.jacobian.transpose();
            h += jt * rp.jacobian * w;
            b += jt * rp.residual * w;
            used += 1;
        }
        if used < 3 {
            return;
        }
        let Some(chol) = h.cholesky() else {
            return;
        };
        let delta = chol.solve(&(-b));
        *pose = pose.retract(&delta);
        if delta.norm() < GN_STEP_TOLERANCE {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 450.0, fy: 455.0, cx: 160.0, cy: 120.0, width: 320, height: 240, depth_scale: 5000.0 }
    }

    /// Ground-truth pose plus `n` exact landmark observations of it.
    fn rig(seed: u64, n: usize) -> (SE3Pose, Vec<Landmark>, FeatureSet, Vec<LandmarkMatch>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intr();
        let twist = Vector6::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        let pose = SE3Pose::identity().retract(&twist);
        let mut landmarks = Vec::new();
        let mut set = FeatureSet::default();
        let mut matches = Vec::new();
        for i in 0..n {
            let u = rng.gen_range(20.0..300.0);
            let v = rng.gen_range(20.0..220.0);
            let d = rng.gen_range(1.0..4.0);
            let pw = pose.transform_point(&k.backproject(u, v, d).unwrap());
            let level = rng.gen_range(0u8..4);
            set.keypoints.push(Keypoint {
                position: Vector2::new(u, v),
                response: 1.0,
                orientation: 0.0,
                level,
            });
            set.descriptors.push(Descriptor([i as u64; 4]));
            set.depths.push(d as f32);
            landmarks.push(Landmark::new(pw, 0, i, Descriptor([i as u64; 4])));
            matches.push(LandmarkMatch { landmark: i, keypoint: i });
        }
        (pose, landmarks, set, matches)
    }

    /// Twist with translation norm `t` and rotation norm `r`.
    fn perturbation(t: f64, r: f64) -> Vector6<f64> {
        let v = Vector3::new(1.0, -2.0, 1.5).normalize() * t;
        let w = Vector3::new(-1.0, 0.5, 2.0).normalize() * r;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    #[test]
    fn noiseless_start_recovers_exactly() {
        let (gt, landmarks, set, matches) = rig(5, 20);
        let start = gt.retract(&perturbation(0.05, 0.05));
        let init = initial_pose(&landmarks, &set, &matches, &start, &intr(), &TrackingConfig::default());
        assert!(!init.weak);
        assert_eq!(init.inliers.len(), 20);
        assert!(init.pose.rotation_angle_to(&gt) < 1e-6, "rot {:e}", init.pose.rotation_angle_to(&gt));
        assert!((init.pose.translation - gt.translation).norm() < 1e-6);
    }

    #[test]
    fn zero_matches_reports_weak_and_keeps_the_prediction() {
        let start = SE3Pose::identity().retract(&perturbation(0.1, 0.05));
        let init =
            initial_pose(&[], &FeatureSet::default(), &[], &start, &intr(), &TrackingConfig::default());
        assert!(init.weak);
        assert_eq!(init.pose.translation, start.translation);
        assert_eq!(init.pose.rotation, start.rotation);
        assert_eq!(init.rounds, 0);
    }

    #[test]
    fn gross_outliers_are_rejected_and_the_pose_still_lands() {
        let (gt, landmarks, mut set, matches) = rig(9, 40);
        // Corrupt 12 of 40 observations (30%) with 50..150 px displacements.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let bad: Vec<usize> = (0..40).filter(|i| i % 10 < 3).collect();
        for &i in &bad {
            let dx = rng.gen_range(50.0..150.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let dy = rng.gen_range(50.0..150.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            set.keypoints[i].position += Vector2::new(dx, dy);
        }
        let start = gt.retract(&perturbation(0.02, 0.02));
        let init = initial_pose(&landmarks, &set, &matches, &start, &intr(), &TrackingConfig::default());
        assert!(!init.weak);
        assert!(init.pose.rotation_angle_to(&gt) < 1e-3, "rot {:e}", init.pose.rotation_angle_to(&gt));
        assert!((init.pose.translation - gt.translation).norm() < 5e-3);
        for &i in &bad {
            assert!(!init.inliers.iter().any(|m| m.keypoint == i), "outlier {i} survived");
        }
        assert_eq!(init.inliers.len(), 40 - bad.len());
    }

    #[test]
    fn few_inliers_after_optimization_is_weak() {
        // 12 matches but 6 are garbage: the survivor count drops below 10.
        let (gt, landmarks, mut set, matches) = rig(21, 12);
        for i in 0..6 {
            set.keypoints[i].position += Vector2::new(200.0, -170.0);
        }
        let init = initial_pose(&landmarks, &set, &matches, &gt, &intr(), &TrackingConfig::default());
        assert!(init.weak);
        assert!(init.inliers.len() < MIN_INLIERS);
    }

    #[test]
    fn outlier_removal_drops_only_the_displaced_match() {
        let (gt, landmarks, mut set, matches) = rig(11, 15);
        set.keypoints[4].position += Vector2::new(50.0, 0.0);
        let kept =
            remove_outliers(&landmarks, &set, &matches, &gt, &intr(), &TrackingConfig::default());
        assert_eq!(kept.len(), 14);
        assert!(!kept.iter().any(|m| m.keypoint == 4));
        // Residuals at the exact pose are numerically zero and must survive.
        assert!(kept.iter().any(|m| m.keypoint == 0));
    }

    #[test]
    fn points_behind_the_camera_are_outliers() {
        let (gt, mut landmarks, set, matches) = rig(13, 12);
        let behind = gt.transform_point(&Vector3::new(0.0, 0.0, -2.0));
        landmarks[7].position = behind;
        let kept =
            remove_outliers(&landmarks, &set, &matches, &gt, &intr(), &TrackingConfig::default());
        assert!(!kept.iter().any(|m| m.landmark == 7));
    }

    #[test]
    fn reprojection_jacobian_matches_finite_differences() {
        let (gt, landmarks, set, matches) = rig(17, 6);
        let k = intr();
        let inv = gt.inverse();
        let r_cw = inv.rotation_matrix();
        for m in &matches {
            let kp = &set.keypoints[m.keypoint];
            let rp =
                reproject(&inv, &r_cw, &landmarks[m.landmark].position, &kp.position, kp.level, &k)
                    .unwrap();
            let h = 1e-6;
            for axis in 0..6 {
                let mut step = Vector6::zeros();
                step[axis] = h;
                let plus = gt.retract(&step);
                let minus = gt.retract(&(-step));
                let rp_p = reproject(
                    &plus.inverse(),
                    &plus.inverse().rotation_matrix(),
                    &landmarks[m.landmark].position,
                    &kp.position,
                    kp.level,
                    &k,
                )
                .unwrap();
                let rp_m = reproject(
                    &minus.inverse(),
                    &minus.inverse().rotation_matrix(),
                    &landmarks[m.landmark].position,
                    &kp.position,
                    kp.level,
                    &k,
                )
                .unwrap();
                let fd = (rp_p.residual - rp_m.residual) / (2.0 * h);
                for row in 0..2 {
                    let a = rp.jacobian[(row, axis)];
                    let scale = a.abs().max(fd[row].abs());
                    if scale > 1e-7 {
                        assert!(
                            (a - fd[row]).abs() / scale < 1e-4,
                            "axis {axis} row {row}: {a} vs {fd:?}"
                        );
                    }
                }
            }
        }
    }
}
