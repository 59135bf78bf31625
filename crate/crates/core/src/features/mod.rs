//! Corner features: pyramid detection, steered binary description, and
//! mutual nearest-neighbor matching.

mod describe;
mod detect;
mod matching;

pub use detect::{grid_cells, grid_quota};
pub use matching::match_features;

use nalgebra::Vector2;
use thiserror::Error;

use crate::grid::GrayF32;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} is below the {min}x{min} minimum")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub const MIN_IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Sub-pixel position in base-image coordinates.
    pub position: Vector2<f64>,
    /// Sum of absolute center-to-ring differences at the detection level.
    pub response: f32,
    /// Intensity-centroid angle in radians at the detection level.
    pub orientation: f64,
    pub level: u8,
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

/// Keypoints, descriptors, and per-keypoint sensor depth as parallel arrays.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Depth at the keypoint's nearest pixel; 0 marks invalid.
    pub depths: Vec<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

fn check_size(gray: &GrayF32) -> Result<(), FeatureError> {
    if gray.width() < MIN_IMAGE_SIZE || gray.height() < MIN_IMAGE_SIZE {
        return Err(FeatureError::ImageTooSmall {
            width: gray.width(),
            height: gray.height(),
            min: MIN_IMAGE_SIZE,
        });
    }
    Ok(())
}

/// Up to `target_count` corners spread over a 30-px grid, strongest first
/// within each cell.
pub fn detect(gray: &GrayF32, target_count: usize) -> Result<Vec<Keypoint>, FeatureError> {
    check_size(gray)?;
    let pyr = detect::Pyramid::build(gray);
    Ok(detect::detect_on(&pyr, target_count))
}

/// Descriptors aligned with `keypoints`; `None` marks a keypoint too close
/// to its level's border to sample.
pub fn describe(gray: &GrayF32, keypoints: &[Keypoint]) -> Result<Vec<Option<Descriptor>>, FeatureError> {
    check_size(gray)?;
    let pyr = detect::Pyramid::build(gray);
    Ok(describe::describe_on(&pyr, keypoints))
}

/// Detects, describes, and attaches nearest-pixel depth in one pass over a
/// shared pyramid. Keypoints that cannot be described are dropped so the
/// output arrays stay parallel.
pub fn extract(gray: &GrayF32, depth: &GrayF32, target_count: usize) -> Result<FeatureSet, FeatureError> {
    check_size(gray)?;
    if !gray.same_shape(depth) {
        return Err(FeatureError::DimensionMismatch(format!(
            "gray {}x{} vs depth {}x{}",
            gray.width(),
            gray.height(),
            depth.width(),
            depth.height()
        )));
    }
    let pyr = detect::Pyramid::build(gray);
    let kps = detect::detect_on(&pyr, target_count);
    let descs = describe::describe_on(&pyr, &kps);

    let mut out = FeatureSet::default();
    for (kp, desc) in kps.into_iter().zip(descs) {
        let Some(desc) = desc else { continue };
        let x = kp.position.x.round() as i64;
        let y = kp.position.y.round() as i64;
        let z = if x >= 0 && y >= 0 && (x as usize) < depth.width() && (y as usize) < depth.height()
        {
            depth.get(x as usize, y as usize)
        } else {
            0.0
        };
        out.keypoints.push(kp);
        out.descriptors.push(desc);
        out.depths.push(if z.is_finite() && z > 0.0 { z } else { 0.0 });
    }
    Ok(out)
}

/// Debug dump: one `x,y,level,response,orientation` row per keypoint.
pub fn keypoints_csv(keypoints: &[Keypoint]) -> String {
    let mut out = String::from("x,y,level,response,orientation\n");
    for kp in keypoints {
        out.push_str(&format!(
            "{:.3},{:.3},{},{:.6},{:.6}\n",
            kp.position.x, kp.position.y, kp.level, kp.response, kp.orientation
        ));
    }
    out
}
