//! A single map primitive and its spawn rule.

use crate::geometry::{GeometryError, Intrinsics, SE3Pose};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Anisotropic 3D Gaussian with appearance.
///
/// `scale` holds per-axis standard deviations (all positive), `opacity` and
/// each `color` channel live in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    /// World-frame covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(&self.rotation, &self.scale)
    }
}

/// `R S S^T R^T`: symmetric positive definite for positive scales, with
/// eigenvalues equal to the squared scale components.
pub fn covariance(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(scale);
    let m = r * s;
    m * m.transpose()
}

/// How spawned Gaussians are sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScaleMode {
    /// Metric footprint of one pixel at the point's camera depth:
    /// `s = z_cam / d_f`.
    #[default]
    PixelFootprint,
    /// World-frame z over mean focal length, kept for fidelity runs. Clamped
    /// to a small positive floor since world z may be non-positive.
    WorldZ,
}

/// Spawns a Gaussian for `pixel` observed at `depth` meters.
///
/// Position is the world-frame back-projection under `pose` (camera-to-world),
/// rotation is identity, opacity 1, and the isotropic scale follows
/// `mode` with `d_f = |(fx + fy) / 2|`.
pub fn initialize_gaussian(
    pixel: (f64, f64),
    depth: f64,
    color: Vector3<f64>,
    pose: &SE3Pose,
    intrinsics: &Intrinsics,
    mode: InitScaleMode,
) -> Result<Gaussian, GeometryError> {
    let p_cam = intrinsics.backproject(pixel.0, pixel.1, depth)?;
    let p_world = pose.transform_point(&p_cam);
    let d_f = intrinsics.mean_focal();
    let s = match mode {
        InitScaleMode::PixelFootprint => p_cam.z / d_f,
        InitScaleMode::WorldZ => (p_world.z / d_f).abs().max(1e-6),
    };
    Ok(Gaussian {
        position: p_world,
        rotation: UnitQuaternion::identity(),
        scale: Vector3::new(s, s, s),
        opacity: 1.0,
        color,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 600.0, fy: 600.0, cx: 320.0, cy: 240.0, width: 640, height: 480, depth_scale: 5000.0 }
    }

    #[test]
    fn covariance_of_axis_aligned_gaussian_is_diagonal() {
        let c = covariance(&UnitQuaternion::identity(), &Vector3::new(2.0, 1.0, 0.5));
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 0.25));
        assert_relative_eq!(c, expect, epsilon = 1e-14);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales_under_rotation() {
        let q = UnitQuaternion::from_euler_angles(0.7, -0.3, 1.9);
        let s = Vector3::new(0.3, 0.02, 1.5);
        let c = covariance(&q, &s);
        assert_relative_eq!(c, c.transpose(), epsilon = 1e-14);
        let mut eig: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = [s.x * s.x, s.y * s.y, s.z * s.z];
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (e, w) in eig.iter().zip(want) {
            assert_relative_eq!(*e, w, max_relative = 1e-12);
        }
    }

    #[test]
    fn spawn_scale_is_depth_over_mean_focal() {
        let g = initialize_gaussian(
            (320.0, 240.0),
            3.0,
            Vector3::new(0.5, 0.2, 0.1),
            &SE3Pose::identity(),
            &intr(),
            InitScaleMode::PixelFootprint,
        )
        .unwrap();
        assert_relative_eq!(g.scale, Vector3::new(0.005, 0.005, 0.005), epsilon = 1e-15);
        assert_eq!(g.opacity, 1.0);
        assert_relative_eq!(g.rotation.angle(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(g.position, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn spawn_position_lands_in_world_frame() {
        let pose = SE3Pose::new(UnitQuaternion::from_euler_angles(0.0, std::f64::consts::FRAC_PI_2, 0.0), Vector3::new(1.0, 2.0, 3.0));
        let g = initialize_gaussian((320.0, 240.0), 2.0, Vector3::zeros(), &pose, &intr(), InitScaleMode::PixelFootprint).unwrap();
        let expect = pose.transform_point(&Vector3::new(0.0, 0.0, 2.0));
        assert_relative_eq!(g.position, expect, epsilon = 1e-12);
    }

    #[test]
    fn spawn_rejects_invalid_depth() {
        let r = initialize_gaussian((10.0, 10.0), 0.0, Vector3::zeros(), &SE3Pose::identity(), &intr(), InitScaleMode::PixelFootprint);
        assert!(r.is_err());
    }
}
