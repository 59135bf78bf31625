//! Corner detection over an image pyramid.
//!
//! Levels are resampled straight from the base image with bilinear weights.
//! Corners come from the 16-pixel segment test (9 contiguous brighter or
//! darker than the center), a 3x3 non-max pass collapses response plateaus,
//! and a 30-px grid quota spreads the survivors across the frame.

use nalgebra::Vector2;

use super::Keypoint;
use crate::grid::GrayF32;

pub(crate) const PYRAMID_LEVELS: usize = 8;
pub(crate) const SCALE_FACTOR: f64 = 1.2;
/// Keypoints keep this many pixels clear of their level's border, enough for
/// the radius-15 orientation patch and any rotated descriptor offset.
pub(crate) const PATCH_MARGIN: i64 = 16;
const FAST_THRESHOLD: f32 = 20.0 / 255.0;
const GRID_CELL: f64 = 30.0;
const ORIENTATION_RADIUS: i64 = 15;

pub(crate) struct Pyramid {
    pub levels: Vec<GrayF32>,
    pub scales: Vec<f64>,
}

impl Pyramid {
    pub fn build(base: &GrayF32) -> Pyramid {
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut scales = Vec::with_capacity(PYRAMID_LEVELS);
        for l in 0..PYRAMID_LEVELS {
            let s = SCALE_FACTOR.powi(l as i32);
            let w = (base.width() as f64 / s).round() as usize;
            let h = (base.height() as f64 / s).round() as usize;
            if w < 2 || h < 2 {
                break;
            }
            scales.push(s);
            if l == 0 {
                levels.push(base.clone());
            } else {
                levels.push(resize_bilinear(base, w, h));
            }
        }
        Pyramid { levels, scales }
    }
}

fn resize_bilinear(src: &GrayF32, w: usize, h: usize) -> GrayF32 {
    let sx = src.width() as f64 / w as f64;
    let sy = src.height() as f64 / h as f64;
    let mut dst = GrayF32::new(w, h, 0.0);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height() - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height() - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width() - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width() - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
            let bot = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
            dst.set(x, y, top * (1.0 - ty) + bot * ty);
        }
    }
    dst
}

/// Bresenham circle of radius 3, clockwise from north.
const CIRCLE: [(i64, i64); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Any cyclic run of `len` set bits in a 16-bit ring.
fn has_arc(mask: u16, len: u32) -> bool {
    let doubled = (mask as u32) | ((mask as u32) << 16);
    let want = (1u32 << len) - 1;
    (0..16).any(|s| (doubled >> s) & want == want)
}

/// Center-to-ring sum of absolute differences, defined at any pixel with the
/// full circle in bounds.
fn sad_response(img: &GrayF32, x: usize, y: usize) -> f32 {
    let p = img.get(x, y);
    CIRCLE
        .iter()
        .map(|(dx, dy)| {
            (img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) - p).abs()
        })
        .sum()
}

/// Vertex offset of the parabola through three samples, clamped to half a
/// pixel. Flat or degenerate neighborhoods stay at the integer position.
fn parabola_offset(before: f32, center: f32, after: f32) -> f64 {
    let denom = (before - 2.0 * center + after) as f64;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    ((before - after) as f64 / (2.0 * denom)).clamp(-0.5, 0.5)
}

/// Segment-test corners with their sum-of-absolute-differences response and
/// a sub-pixel position from a parabola fit over the response surface,
/// thinned to 3x3 local maxima. Plateau ties go to the smallest (y, x).
fn detect_level(img: &GrayF32, threshold: f32) -> Vec<(f64, f64, f32)> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w <= 2 * PATCH_MARGIN || h <= 2 * PATCH_MARGIN {
        return Vec::new();
    }
    let mut response = GrayF32::new(img.width(), img.height(), 0.0);
    let mut hits = Vec::new();
    for y in PATCH_MARGIN..h - PATCH_MARGIN {
        for x in PATCH_MARGIN..w - PATCH_MARGIN {
            let p = img.get(x as usize, y as usize);
            let hi = p + threshold;
            let lo = p - threshold;

            // A run of 9 always covers two opposite-ish compass points.
            let c0 = img.get(x as usize, (y - 3) as usize);
            let c4 = img.get((x + 3) as usize, y as usize);
            let c8 = img.get(x as usize, (y + 3) as usize);
            let c12 = img.get((x - 3) as usize, y as usize);
            let nb = (c0 > hi) as u8 + (c4 > hi) as u8 + (c8 > hi) as u8 + (c12 > hi) as u8;
            let nd = (c0 < lo) as u8 + (c4 < lo) as u8 + (c8 < lo) as u8 + (c12 < lo) as u8;
            if nb < 2 && nd < 2 {
                continue;
            }

            let mut bright = 0u16;
            let mut dark = 0u16;
            let mut sad = 0.0f32;
            for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
                let v = img.get((x + dx) as usize, (y + dy) as usize);
                if v > hi {
                    bright |= 1 << k;
                }
                if v < lo {
                    dark |= 1 << k;
                }
                sad += (v - p).abs();
            }
            if has_arc(bright, 9) || has_arc(dark, 9) {
                response.set(x as usize, y as usize, sad);
                hits.push((x as usize, y as usize));
            }
        }
    }

    let mut out = Vec::new();
    for &(x, y) in &hits {
        let r = response.get(x, y);
        let mut is_max = true;
        'scan: for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nr = response.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                let earlier = dy < 0 || (dy == 0 && dx < 0);
                if (earlier && nr >= r) || (!earlier && nr > r) {
                    is_max = false;
                    break 'scan;
                }
            }
        }
        if is_max {
            // the response map is sparse (corners only), so sample the
            // surface directly for the sub-pixel fit
            let ox = parabola_offset(sad_response(img, x - 1, y), r, sad_response(img, x + 1, y));
            let oy = parabola_offset(sad_response(img, x, y - 1), r, sad_response(img, x, y + 1));
            out.push((x as f64 + ox, y as f64 + oy, r));
        }
    }
    out
}

fn disc_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Intensity-centroid angle of the disc around (x, y).
fn orientation(img: &GrayF32, x: usize, y: usize, disc: &[(i64, i64)]) -> f64 {
    let mut m10 = 0.0f64;
    let mut m01 = 0.0f64;
    for &(dx, dy) in disc {
        let v = img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) as f64;
        m10 += dx as f64 * v;
        m01 += dy as f64 * v;
    }
    m01.atan2(m10)
}

pub(crate) fn detect_on(pyr: &Pyramid, target_count: usize) -> Vec<Keypoint> {
    if target_count == 0 {
        return Vec::new();
    }
    let disc = disc_offsets(ORIENTATION_RADIUS);
    let run = |threshold: f32| {
        let mut all = Vec::new();
        for (lvl, img) in pyr.levels.iter().enumerate() {
            let s = pyr.scales[lvl];
            for (x, y, r) in detect_level(img, threshold) {
                all.push(Keypoint {
                    position: Vector2::new(x * s, y * s),
                    response: r,
                    orientation: orientation(img, x.round() as usize, y.round() as usize, &disc),
                    level: lvl as u8,
                });
            }
        }
        all
    };

    let mut all = run(FAST_THRESHOLD);
    if all.len() < target_count / 2 {
        all = run(FAST_THRESHOLD * 0.5);
    }
    grid_filter(all, pyr.levels[0].width(), pyr.levels[0].height(), target_count)
}

/// Number of 30-px cells covering a `width` x `height` image.
pub fn grid_cells(width: usize, height: usize) -> usize {
    let cx = (width as f64 / GRID_CELL).ceil() as usize;
    let cy = (height as f64 / GRID_CELL).ceil() as usize;
    cx.max(1) * cy.max(1)
}

/// Per-cell keypoint quota for a target budget on a `width` x `height` image.
pub fn grid_quota(width: usize, height: usize, target_count: usize) -> usize {
    let cells = grid_cells(width, height);
    target_count.div_ceil(cells).max(1)
}

/// Keeps the strongest responses per 30-px cell up to the quota, then the
/// strongest overall up to the target. Output is sorted by (level, y, x).
fn grid_filter(mut kps: Vec<Keypoint>, width: usize, height: usize, target: usize) -> Vec<Keypoint> {
    let cells_x = ((width as f64 / GRID_CELL).ceil() as usize).max(1);
    let cells_y = ((height as f64 / GRID_CELL).ceil() as usize).max(1);
    let quota = grid_quota(width, height, target);

    kps.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then(a.level.cmp(&b.level))
            .then(a.position.y.partial_cmp(&b.position.y).unwrap())
            .then(a.position.x.partial_cmp(&b.position.x).unwrap())
    });

    let mut per_cell = vec![0usize; cells_x * cells_y];
    let mut picked = Vec::new();
    for kp in kps {
        let cx = ((kp.position.x / GRID_CELL) as usize).min(cells_x - 1);
        let cy = ((kp.position.y / GRID_CELL) as usize).min(cells_y - 1);
        let cell = cy * cells_x + cx;
        if per_cell[cell] < quota {
            per_cell[cell] += 1;
            picked.push(kp);
            if picked.len() == target {
                break;
            }
        }
    }

    picked.sort_by(|a, b| {
        a.level
            .cmp(&b.level)
            .then(a.position.y.partial_cmp(&b.position.y).unwrap())
            .then(a.position.x.partial_cmp(&b.position.x).unwrap())
    });
    picked
}
