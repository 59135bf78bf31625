//! Trajectory and image-quality metrics.

use super::SeqError;
use crate::geometry::{umeyama_align, Trajectory};
use crate::grid::RgbF32;

const ASSOC_TOLERANCE: f64 = 0.02;

/// Absolute trajectory error in centimeters: rigid-align the estimate onto
/// the ground truth (timestamp association, then point-set alignment), then
/// RMSE over translational residuals.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, SeqError> {
    let pairs = est.associate(gt, ASSOC_TOLERANCE);
    if pairs.len() < 3 {
        return Err(SeqError::TooFewAssociations { need: 3 });
    }
    let align = umeyama_align(est, gt, ASSOC_TOLERANCE)?;
    let mut sq = 0.0;
    for (e, g) in &pairs {
        let r = align.transform_point(&e.1.translation) - g.1.translation;
        sq += r.norm_squared();
    }
    Ok((sq / pairs.len() as f64).sqrt() * 100.0)
}

/// Peak signal-to-noise ratio in dB over [0,1] images; +inf when identical.
pub fn psnr(a: &RgbF32, b: &RgbF32) -> Result<f64, SeqError> {
    if !a.same_shape(b) {
        return Err(SeqError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut mse = 0.0f64;
    for (pa, pb) in a.data().iter().zip(b.data()) {
        for ch in 0..3 {
            let d = pa[ch] as f64 - pb[ch] as f64;
            mse += d * d;
        }
    }
    mse /= (a.width() * a.height() * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
