//! Field storage and the reparameterized optimizer step.
//!
//! Gradients arrive in value space (scale `s`, opacity `o`). Steps are taken
//! in an unconstrained space instead: `log s` for scales and `logit o` for
//! opacity, so positivity and the `[0, 1]` range survive any step size. The
//! chain rule factors are `ds = s d(log s)` and `do = o (1 - o) d(logit o)`.

use super::{FieldError, Gaussian};
use nalgebra::{UnitQuaternion, Vector3, Vector4};

/// Opacity is stored through a logistic map; cap the pre-image so spawn
/// opacity 1 stays finite. sigmoid(15) differs from 1 by ~3e-7, far inside
/// the renderer's 0.999 alpha clamp.
const LOGIT_CAP: f64 = 15.0;

pub(crate) fn logit(o: f64) -> f64 {
    let o = o.clamp(1e-12, 1.0);
    let x = (o / (1.0 - o).max(1e-300)).ln();
    x.clamp(-LOGIT_CAP, LOGIT_CAP)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-Gaussian value-space gradients plus the 6-DoF pose channel.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Gradient w.r.t. a left-multiplicative `[v, w]` increment on the
    /// camera-to-world pose the render was taken from.
    pub pose: nalgebra::SVector<f64, 6>,
}

impl FieldGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            pose: nalgebra::SVector::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn add_assign(&mut self, other: &FieldGradients) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.rotation[i] += other.rotation[i];
            self.scale[i] += other.scale[i];
            self.opacity[i] += other.opacity[i];
            self.color[i] += other.color[i];
        }
        self.pose += other.pose;
    }

    pub fn scale_by(&mut self, k: f64) {
        for i in 0..self.len() {
            self.position[i] *= k;
            self.rotation[i] *= k;
            self.scale[i] *= k;
            self.opacity[i] *= k;
            self.color[i] *= k;
        }
        self.pose *= k;
    }
}

/// Step sizes per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldLearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for FieldLearningRates {
    fn default() -> Self {
        Self { position: 1e-4, rotation: 1e-3, scale: 5e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

const PARAMS_PER_GAUSSIAN: usize = 14;

/// The map. Structural edits (spawn, prune) bump `generation`, which lets
/// renders detect that their cached projection went stale.
#[derive(Debug, Clone, Default)]
pub struct GaussianField {
    gaussians: Vec<Gaussian>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    generation: u64,
}

impl GaussianField {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        Self {
            gaussians,
            adam_m: vec![0.0; n * PARAMS_PER_GAUSSIAN],
            adam_v: vec![0.0; n * PARAMS_PER_GAUSSIAN],
            adam_t: 0,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn get(&self, i: usize) -> &Gaussian {
        &self.gaussians[i]
    }

    /// Direct mutation for tests and re-fitting; counts as a structural edit.
    pub fn get_mut(&mut self, i: usize) -> &mut Gaussian {
        self.generation += 1;
        &mut self.gaussians[i]
    }

    pub fn spawn(&mut self, g: Gaussian) {
        self.gaussians.push(g);
        self.adam_m.extend_from_slice(&[0.0; PARAMS_PER_GAUSSIAN]);
        self.adam_v.extend_from_slice(&[0.0; PARAMS_PER_GAUSSIAN]);
        self.generation += 1;
    }

    pub fn spawn_all(&mut self, gs: impl IntoIterator<Item = Gaussian>) {
        for g in gs {
            self.gaussians.push(g);
        }
        self.adam_m.resize(self.gaussians.len() * PARAMS_PER_GAUSSIAN, 0.0);
        self.adam_v.resize(self.gaussians.len() * PARAMS_PER_GAUSSIAN, 0.0);
        self.generation += 1;
    }

    /// Drops Gaussians with opacity below `threshold`, carrying their
    /// optimizer state out with them. Returns how many were removed.
    pub fn prune_transparent(&mut self, threshold: f64) -> usize {
        let keep: Vec<bool> = self.gaussians.iter().map(|g| g.opacity >= threshold).collect();
        let removed = keep.iter().filter(|k| !**k).count();
        if removed == 0 {
            return 0;
        }
        let mut w = 0;
        for r in 0..self.gaussians.len() {
            if keep[r] {
                self.gaussians.swap(w, r);
                for p in 0..PARAMS_PER_GAUSSIAN {
                    self.adam_m.swap(w * PARAMS_PER_GAUSSIAN + p, r * PARAMS_PER_GAUSSIAN + p);
                    self.adam_v.swap(w * PARAMS_PER_GAUSSIAN + p, r * PARAMS_PER_GAUSSIAN + p);
                }
                w += 1;
            }
        }
        // swap-compaction above preserves relative order of survivors
        self.gaussians.truncate(w);
        self.adam_m.truncate(w * PARAMS_PER_GAUSSIAN);
        self.adam_v.truncate(w * PARAMS_PER_GAUSSIAN);
        self.generation += 1;
        removed
    }

    /// One Adam step against value-space gradients.
    ///
    /// Scale/opacity gradients are chained into their unconstrained
    /// parameterizations before the moment update; after stepping, rotations
    /// are renormalized and colors clamped back to `[0, 1]`.
    pub fn adam_step(&mut self, grads: &FieldGradients, lr: &FieldLearningRates) -> Result<(), FieldError> {
        if grads.len() != self.gaussians.len() {
            return Err(FieldError::GradientSizeMismatch { expected: self.gaussians.len(), got: grads.len() });
        }
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_t += 1;
        let bc1 = 1.0 - BETA1.powi(self.adam_t as i32);
        let bc2 = 1.0 - BETA2.powi(self.adam_t as i32);

        for (i, g) in self.gaussians.iter_mut().enumerate() {
            let base = i * PARAMS_PER_GAUSSIAN;
            let mut raw = [0.0f64; PARAMS_PER_GAUSSIAN];
            // Gradients in the stepped (unconstrained) space.
            for k in 0..3 {
                raw[k] = grads.position[i][k];
            }
            for k in 0..4 {
                raw[3 + k] = grads.rotation[i][k];
            }
            for k in 0..3 {
                raw[7 + k] = grads.scale[i][k] * g.scale[k]; // d/d log s
            }
            raw[10] = grads.opacity[i] * g.opacity * (1.0 - g.opacity); // d/d logit o
            for k in 0..3 {
                raw[11 + k] = grads.color[i][k];
            }

            let mut params = [
                g.position.x,
                g.position.y,
                g.position.z,
                g.rotation.w,
                g.rotation.i,
                g.rotation.j,
                g.rotation.k,
                g.scale.x.ln(),
                g.scale.y.ln(),
                g.scale.z.ln(),
                logit(g.opacity),
                g.color.x,
                g.color.y,
                g.color.z,
            ];
            let rates = [
                lr.position,
                lr.position,
                lr.position,
                lr.rotation,
                lr.rotation,
                lr.rotation,
                lr.rotation,
                lr.scale,
                lr.scale,
                lr.scale,
                lr.opacity,
                lr.color,
                lr.color,
                lr.color,
            ];
            for p in 0..PARAMS_PER_GAUSSIAN {
                let m = &mut self.adam_m[base + p];
                let v = &mut self.adam_v[base + p];
                *m = BETA1 * *m + (1.0 - BETA1) * raw[p];
                *v = BETA2 * *v + (1.0 - BETA2) * raw[p] * raw[p];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                params[p] -= rates[p] * m_hat / (v_hat.sqrt() + EPS);
            }

            g.position = Vector3::new(params[0], params[1], params[2]);
            let q = nalgebra::Quaternion::new(params[3], params[4], params[5], params[6]);
            g.rotation = UnitQuaternion::from_quaternion(q);
            if g.rotation.w < 0.0 {
                g.rotation = UnitQuaternion::new_unchecked(-g.rotation.into_inner());
            }
            g.scale = Vector3::new(
                params[7].clamp(-LOGIT_CAP, LOGIT_CAP).exp(),
                params[8].clamp(-LOGIT_CAP, LOGIT_CAP).exp(),
                params[9].clamp(-LOGIT_CAP, LOGIT_CAP).exp(),
            );
            g.opacity = sigmoid(params[10].clamp(-LOGIT_CAP, LOGIT_CAP));
            g.color = Vector3::new(params[11].clamp(0.0, 1.0), params[12].clamp(0.0, 1.0), params[13].clamp(0.0, 1.0));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn unit_gaussian() -> Gaussian {
        Gaussian {
            position: Vector3::new(0.0, 0.0, 2.0),
            rotation: UnitQuaternion::identity(),
            scale: Vector3::new(0.01, 0.01, 0.01),
            opacity: 0.8,
            color: Vector3::new(0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn spawn_resizes_optimizer_state_and_bumps_generation() {
        let mut f = GaussianField::new();
        let g0 = f.generation();
        f.spawn(unit_gaussian());
        assert_eq!(f.len(), 1);
        assert_eq!(f.adam_m.len(), PARAMS_PER_GAUSSIAN);
        assert!(f.generation() > g0);
    }

    #[test]
    fn prune_removes_only_transparent_gaussians() {
        let mut f = GaussianField::new();
        let mut faint = unit_gaussian();
        faint.opacity = 0.001;
        f.spawn(unit_gaussian());
        f.spawn(faint);
        f.spawn(unit_gaussian());
        let removed = f.prune_transparent(0.005);
        assert_eq!(removed, 1);
        assert_eq!(f.len(), 2);
        assert!(f.gaussians().iter().all(|g| g.opacity >= 0.005));
    }

    #[test]
    fn invariants_survive_large_gradient_steps() {
        let mut f = GaussianField::new();
        f.spawn(unit_gaussian());
        let lr = FieldLearningRates { position: 0.1, rotation: 0.1, scale: 0.5, opacity: 0.5, color: 0.5 };
        for sign in [1.0, -1.0] {
            for _ in 0..50 {
                let mut g = FieldGradients::zeros(1);
                g.scale[0] = Vector3::new(sign * 1e3, sign * 1e3, sign * 1e3);
                g.opacity[0] = sign * 1e3;
                g.color[0] = Vector3::new(sign * 1e3, 0.0, -sign * 1e3);
                g.rotation[0] = nalgebra::Vector4::new(0.1, 0.2, -0.1, 0.05) * sign;
                f.adam_step(&g, &lr).unwrap();
                let gg = f.get(0);
                assert!(gg.scale.iter().all(|s| *s > 0.0));
                assert!((0.0..=1.0).contains(&gg.opacity));
                assert!(gg.color.iter().all(|c| (0.0..=1.0).contains(c)));
                assert!((gg.rotation.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_size_mismatch_is_rejected() {
        let mut f = GaussianField::new();
        f.spawn(unit_gaussian());
        let g = FieldGradients::zeros(2);
        assert!(f.adam_step(&g, &FieldLearningRates::default()).is_err());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut f = GaussianField::new();
        f.spawn(unit_gaussian());
        let before = *f.get(0);
        f.adam_step(&FieldGradients::zeros(1), &FieldLearningRates::default()).unwrap();
        let after = *f.get(0);
        assert_eq!(before.position, after.position);
        // scale/opacity round-trip through log/logit space; allow ulp noise
        assert!((before.scale - after.scale).norm() < 1e-15);
        assert!((before.opacity - after.opacity).abs() < 1e-15);
    }
}
