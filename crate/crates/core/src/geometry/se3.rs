//! SE(3) poses stored as a unit quaternion plus translation, with the
//! exponential and logarithm maps used for 6-DoF tangent increments.
//!
//! Tangent vectors are laid out `[v, w]`: translational part first, rotational
//! part second. Increments act on the left, `pose' = se3_exp(delta) * pose`,
//! which is the convention every optimizer in this crate differentiates
//! against.

use nalgebra::{Matrix3, Quaternion, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// 6-DoF tangent vector `[v_x, v_y, v_z, w_x, w_y, w_z]`.
pub type Twist = SVector<f64, 6>;

/// Rigid-body transform; rotation kept as a unit quaternion with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }.canonicalized()
    }

    pub fn from_parts(tx: f64, ty: f64, tz: f64, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(q, Vector3::new(tx, ty, tz))
    }

    /// Flips the quaternion sign so `w >= 0`; both signs encode one rotation.
    pub fn canonicalized(mut self) -> Self {
        if self.rotation.w < 0.0 {
            self.rotation = UnitQuaternion::new_unchecked(-self.rotation.into_inner());
        }
        self
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> SE3Pose {
        let r_inv = self.rotation.inverse();
        SE3Pose::new(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self^-1 * other`, the increment taking `self` to `other`.
    pub fn relative_to(&self, other: &SE3Pose) -> SE3Pose {
        self.inverse().compose(other)
    }

    /// Left-multiplicative retraction: `se3_exp(delta) * self`.
    pub fn retract(&self, delta: &Twist) -> SE3Pose {
        se3_exp(delta).compose(self)
    }

    /// Rotation angle in radians between the two poses' orientations.
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map of `[v, w]`.
///
/// `R = exp([w]x)` and `t = V(w) v` with
/// `V = I + (1-cos t)/t^2 [w]x + (t-sin t)/t^3 [w]x^2`; the coefficients fall
/// back to their series below `t^2 = 1e-12` so the map is smooth through zero.
pub fn se3_exp(xi: &Twist) -> SE3Pose {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let wx = skew(&w);
    let wx2 = wx * wx;

    let (a, b, c) = if theta_sq < 1e-12 {
        // sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta_sq, (theta - theta.sin()) / (theta_sq * theta))
    };

    let r = Matrix3::identity() + wx * a + wx2 * b;
    let v_mat = Matrix3::identity() + wx * b + wx2 * c;
    let rotation = UnitQuaternion::from_matrix(&r);
    SE3Pose::new(rotation, v_mat * v)
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &SE3Pose) -> Twist {
    let w = pose.rotation.scaled_axis();
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let wx = skew(&w);
    let wx2 = wx * wx;

    // V^-1 = I - 1/2 [w]x + eta [w]x^2 with eta = (1 - t cot(t/2) / 2) / t^2.
    let eta = if theta_sq < 1e-12 {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / theta_sq
    };
    let v_inv = Matrix3::identity() - wx * 0.5 + wx2 * eta;
    let v = v_inv * pose.translation;

    let mut xi = Twist::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&v);
    xi.fixed_rows_mut::<3>(3).copy_from(&w);
    xi
}
