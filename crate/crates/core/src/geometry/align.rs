//! Rigid (rotation + translation, no scale) least-squares alignment of point
//! sets, used to register an estimated trajectory onto ground truth before
//! computing translational error.

use super::{GeometryError, SE3Pose, Trajectory};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Finds the rigid transform `T` minimizing `sum_i |T(src_i) - dst_i|^2`.
///
/// Kabsch with SVD sign correction: `R = U diag(1, 1, det(U V^T)) V^T` from
/// the SVD of the cross-covariance, `t = mean(dst) - R mean(src)`. Errors on
/// fewer than three pairs or when the points are collinear (second singular
/// value vanishes), which leaves the rotation unobservable.
pub fn umeyama_align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<SE3Pose, GeometryError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeometryError::DegenerateAlignment(format!(
            "need >= 3 paired points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| GeometryError::DegenerateAlignment("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| GeometryError::DegenerateAlignment("svd failed".into()))?;

    let s0 = svd.singular_values[0];
    if svd.singular_values[1] <= s0.max(1.0) * 1e-12 {
        return Err(GeometryError::DegenerateAlignment("points are collinear".into()));
    }

    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rotation = UnitQuaternion::from_matrix(&r);
    let t = mu_d - r * mu_s;
    Ok(SE3Pose::new(rotation, t))
}

/// Aligns estimated trajectory positions onto ground-truth positions.
///
/// Pose pairs are associated by nearest timestamp within `tol` seconds; the
/// returned transform maps estimated positions into the ground-truth frame.
pub fn umeyama_align(estimated: &Trajectory, ground_truth: &Trajectory, tol: f64) -> Result<SE3Pose, GeometryError> {
    let pairs = estimated.associate(ground_truth, tol);
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.1.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.1.translation).collect();
    umeyama_align_points(&src, &dst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0))
            .collect()
    }

    #[test]
    fn recovers_known_rigid_transform_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let src = cloud(&mut rng, 30);
            let t_true = SE3Pose::new(
                UnitQuaternion::from_euler_angles(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let dst: Vec<_> = src.iter().map(|p| t_true.transform_point(p)).collect();
            let t = umeyama_align_points(&src, &dst).unwrap();
            assert!((t.translation - t_true.translation).norm() < 1e-9);
            assert!(t.rotation.angle_to(&t_true.rotation) < 1e-9);
        }
    }

    #[test]
    fn transformed_trajectory_aligns_back_with_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t_known = SE3Pose::new(UnitQuaternion::from_euler_angles(0.3, -0.8, 1.1), Vector3::new(2.0, -1.0, 0.5));
        let mut gt = Trajectory::new();
        let mut est = Trajectory::new();
        for i in 0..50 {
            let p = SE3Pose::new(UnitQuaternion::identity(), cloud(&mut rng, 1)[0]);
            gt.push(i as f64, p).unwrap();
            // est = T * gt, so the aligning transform must be T^-1.
            est.push(i as f64, t_known.compose(&p)).unwrap();
        }
        let a = umeyama_align(&est, &gt, 0.02).unwrap();
        let t_inv = t_known.inverse();
        assert!((a.translation - t_inv.translation).norm() < 1e-9);
        assert!(a.rotation.angle_to(&t_inv.rotation) < 1e-9);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let src: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, -i as f64)).collect();
        let dst = src.clone();
        assert!(matches!(umeyama_align_points(&src, &dst), Err(GeometryError::DegenerateAlignment(_))));
    }

    #[test]
    fn too_few_points_are_rejected() {
        let p = vec![Vector3::zeros(), Vector3::x()];
        assert!(umeyama_align_points(&p, &p).is_err());
    }
}
