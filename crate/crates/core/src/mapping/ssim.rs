//! Structural similarity with an analytic derivative.
//!
//! Local statistics use the standard 11x11 Gaussian window (sigma 1.5) over
//! valid positions only, so an image must be at least 11 pixels on each side.
//! RGB scores are the per-channel mean. The derivative w.r.t. the first image
//! comes out in closed form as three window-space fields scattered back
//! through the window weights, which keeps backward at the same cost as
//! forward.

use super::MappingError;
use crate::grid::{GrayF64, Mask, RgbF64};

pub(crate) const WIN: usize = 11;
pub(crate) const RADIUS: usize = 5;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid convolution; output is (W-10) x (H-10).
fn conv_valid(img: &GrayF64, w: &[f64; WIN]) -> GrayF64 {
    let (iw, ih) = (img.width(), img.height());
    let (ow, oh) = (iw - WIN + 1, ih - WIN + 1);
    let mut tmp = GrayF64::new(ow, ih, 0.0);
    for y in 0..ih {
        let row = img.row(y);
        for x in 0..ow {
            let mut s = 0.0;
            for (i, wi) in w.iter().enumerate() {
                s += wi * row[x + i];
            }
            tmp.set(x, y, s);
        }
    }
    let mut out = GrayF64::new(ow, oh, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, wj) in w.iter().enumerate() {
                s += wj * tmp.get(x, y + j);
            }
            out.set(x, y, s);
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: scatters window-space values back onto pixels.
fn conv_valid_adjoint(g: &GrayF64, w: &[f64; WIN], iw: usize, ih: usize) -> GrayF64 {
    let (ow, oh) = (g.width(), g.height());
    let mut tmp = GrayF64::new(ow, ih, 0.0);
    for yq in 0..oh {
        for x in 0..ow {
            let v = g.get(x, yq);
            if v == 0.0 {
                continue;
            }
            for (j, wj) in w.iter().enumerate() {
                let y = yq + j;
                tmp.set(x, y, tmp.get(x, y) + wj * v);
            }
        }
    }
    let mut out = GrayF64::new(iw, ih, 0.0);
    for y in 0..ih {
        for xq in 0..ow {
            let v = tmp.get(xq, y);
            if v == 0.0 {
                continue;
            }
            for (i, wi) in w.iter().enumerate() {
                out.set(xq + i, y, out.get(xq + i, y) + wi * v);
            }
        }
    }
    out
}

/// Window-space first and central second moments of one channel pair.
struct ChannelStats {
    mu_x: GrayF64,
    mu_y: GrayF64,
    sxx: GrayF64,
    syy: GrayF64,
    sxy: GrayF64,
    map: GrayF64,
}

fn channel_stats(xp: &GrayF64, yp: &GrayF64, w: &[f64; WIN]) -> ChannelStats {
    let mu_x = conv_valid(xp, w);
    let mu_y = conv_valid(yp, w);
    let xx = conv_valid(&mul(xp, xp), w);
    let yy = conv_valid(&mul(yp, yp), w);
    let xy = conv_valid(&mul(xp, yp), w);
    let n = mu_x.len();
    let mut sxx = GrayF64::new(mu_x.width(), mu_x.height(), 0.0);
    let mut syy = sxx.clone();
    let mut sxy = sxx.clone();
    let mut map = sxx.clone();
    for idx in 0..n {
        let mx = mu_x.at(idx);
        let my = mu_y.at(idx);
        let vxx = xx.at(idx) - mx * mx;
        let vyy = yy.at(idx) - my * my;
        let vxy = xy.at(idx) - mx * my;
        // identical inputs give bitwise-equal numerator and denominator here,
        // so a self-comparison scores exactly 1.0
        let a1 = 2.0 * (mx * my) + C1;
        let a2 = 2.0 * vxy + C2;
        let b1 = (mx * mx + my * my) + C1;
        let b2 = (vxx + vyy) + C2;
        sxx.data_mut()[idx] = vxx;
        syy.data_mut()[idx] = vyy;
        sxy.data_mut()[idx] = vxy;
        map.data_mut()[idx] = (a1 * a2) / (b1 * b2);
    }
    ChannelStats { mu_x, mu_y, sxx, syy, sxy, map }
}

fn mul(a: &GrayF64, b: &GrayF64) -> GrayF64 {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn plane(img: &RgbF64, ch: usize) -> GrayF64 {
    img.map(|c| c[ch])
}

/// Cached similarity statistics between an estimate `x` and a target `y`.
///
/// When a mask is supplied, only windows whose center pixel is set count
/// toward the mean (and toward the gradient). An empty selection yields a
/// mean of 0 and zero gradients; callers guard degenerate masks themselves.
pub struct SsimEval {
    channels: Vec<ChannelStats>,
    selected: Mask,
    count: usize,
    mean: f64,
    img_w: usize,
    img_h: usize,
}

/// Evaluates channel-mean SSIM, optionally restricted to windows centered on
/// mask pixels.
pub fn ssim_rgb(x: &RgbF64, y: &RgbF64, mask: Option<&Mask>) -> Result<SsimEval, MappingError> {
    if !x.same_shape(y) {
        return Err(MappingError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    if x.width() < WIN || x.height() < WIN {
        return Err(MappingError::ImageTooSmall { width: x.width(), height: x.height(), min: WIN });
    }
    if let Some(m) = mask {
        if !m.same_shape(x) {
            return Err(MappingError::DimensionMismatch("mask shape".into()));
        }
    }
    let w = window();
    let channels: Vec<ChannelStats> =
        (0..3).map(|ch| channel_stats(&plane(x, ch), &plane(y, ch), &w)).collect();

    let (ow, oh) = (x.width() - WIN + 1, x.height() - WIN + 1);
    let mut selected = Mask::new(ow, oh, true);
    if let Some(m) = mask {
        for wy in 0..oh {
            for wx in 0..ow {
                selected.set(wx, wy, m.get(wx + RADIUS, wy + RADIUS));
            }
        }
    }
    let count = selected.count();
    let mut sum = 0.0;
    for idx in 0..ow * oh {
        if selected.at(idx) {
            sum += (channels[0].map.at(idx) + channels[1].map.at(idx)) + channels[2].map.at(idx);
        }
    }
    let mean = if count == 0 { 0.0 } else { sum / (3 * count) as f64 };
    Ok(SsimEval { channels, selected, count, mean, img_w: x.width(), img_h: x.height() })
}

/// Spec'd scalar form: unmasked channel-mean SSIM.
pub fn ssim(x: &RgbF64, y: &RgbF64) -> Result<f64, MappingError> {
    Ok(ssim_rgb(x, y, None)?.mean())
}

impl SsimEval {
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Number of windows contributing to the mean.
    pub fn window_count(&self) -> usize {
        self.count
    }

    /// dL/dx given dL/d(mean) = `upstream`; `x` and `y` must be the images
    /// the evaluation was built from.
    pub fn backward(&self, x: &RgbF64, y: &RgbF64, upstream: f64) -> RgbF64 {
        let mut grad = RgbF64::new(self.img_w, self.img_h, [0.0; 3]);
        if self.count == 0 || upstream == 0.0 {
            return grad;
        }
        let w = window();
        let u = upstream / (3 * self.count) as f64;
        for (ch, st) in self.channels.iter().enumerate() {
            let (ow, oh) = (st.map.width(), st.map.height());
            let mut d1 = GrayF64::new(ow, oh, 0.0);
            let mut d2 = d1.clone();
            let mut d3 = d1.clone();
            for idx in 0..ow * oh {
                if !self.selected.at(idx) {
                    continue;
                }
                let mx = st.mu_x.at(idx);
                let my = st.mu_y.at(idx);
                let a1 = 2.0 * (mx * my) + C1;
                let a2 = 2.0 * st.sxy.at(idx) + C2;
                let b1 = (mx * mx + my * my) + C1;
                let b2 = (st.sxx.at(idx) + st.syy.at(idx)) + C2;
                // d map / d mu_x, and the coefficients of (y - mu_y), (x - mu_x)
                let c1 = 2.0 * (a2 * my / (b1 * b2) - a1 * a2 * mx / (b1 * b1 * b2));
                let c2 = 2.0 * a1 / (b1 * b2);
                let c3 = -2.0 * a1 * a2 / (b1 * b2 * b2);
                d1.data_mut()[idx] = u * (c1 - c2 * my - c3 * mx);
                d2.data_mut()[idx] = u * c2;
                d3.data_mut()[idx] = u * c3;
            }
            let t1 = conv_valid_adjoint(&d1, &w, self.img_w, self.img_h);
            let t2 = conv_valid_adjoint(&d2, &w, self.img_w, self.img_h);
            let t3 = conv_valid_adjoint(&d3, &w, self.img_w, self.img_h);
            for idx in 0..self.img_w * self.img_h {
                grad.data_mut()[idx][ch] =
                    t1.at(idx) + y.at(idx)[ch] * t2.at(idx) + x.at(idx)[ch] * t3.at(idx);
            }
        }
        grad
    }
}
