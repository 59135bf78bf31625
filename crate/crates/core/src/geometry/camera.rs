//! Pinhole camera model. No distortion: datasets are assumed pre-rectified.

use super::GeometryError;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw 16-bit depth units per meter (5000 for the RGB-D benchmark files).
    pub depth_scale: f64,
}

impl Intrinsics {
    /// TUM fr2 defaults at full resolution.
    pub fn tum_fr2() -> Self {
        Self { fx: 520.9, fy: 521.0, cx: 325.1, cy: 249.7, width: 640, height: 480, depth_scale: 5000.0 }
    }

    /// Rescale to a new image size, keeping the field of view.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            depth_scale: self.depth_scale,
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Lifts pixel `(u, v)` at `depth` meters into the camera frame.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::InvalidDepth { depth });
        }
        Ok(Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth))
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Mean focal length, the pixel-to-metric factor used when sizing
    /// newly spawned Gaussians.
    #[inline]
    pub fn mean_focal(&self) -> f64 {
        ((self.fx + self.fy) / 2.0).abs()
    }
}
