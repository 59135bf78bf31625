//! Adam for small fixed-size parameter vectors (camera pose increments).
//!
//! The Gaussian field keeps its own per-parameter moment arrays; this is the
//! same update rule for plain vectors, returning the step to apply rather
//! than mutating parameters, since poses live on a manifold and the caller
//! retracts.

use nalgebra::SVector;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct VecAdam<const N: usize> {
    m: SVector<f64, N>,
    v: SVector<f64, N>,
    t: u64,
}

impl<const N: usize> Default for VecAdam<N> {
    fn default() -> Self {
        Self::new()
    }
}

impl<const N: usize> VecAdam<N> {
    pub fn new() -> Self {
        Self { m: SVector::zeros(), v: SVector::zeros(), t: 0 }
    }

    /// Bias-corrected update direction for `grad`; add the result to the
    /// parameters (it already contains the minus sign).
    pub fn step(&mut self, lr: f64, grad: &SVector<f64, N>) -> SVector<f64, N> {
        self.t += 1;
        let mut delta = SVector::zeros();
        for i in 0..N {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - BETA1.powi(self.t as i32));
            let vh = self.v[i] / (1.0 - BETA2.powi(self.t as i32));
            delta[i] = -lr * mh / (vh.sqrt() + EPS);
        }
        delta
    }

    pub fn reset(&mut self) {
        self.m = SVector::zeros();
        self.v = SVector::zeros();
        self.t = 0;
    }
}
