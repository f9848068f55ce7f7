//! Pinhole camera intrinsics.

use nalgebra::{Vector2, Vector3};

use crate::error::{EvsplatError, Result};

/// Pinhole intrinsics. Pixel centers sit at integer coordinates, so the
/// principal point `(cx, cy)` is expressed in the same units as pixel
/// indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(EvsplatError::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64) || !(cy > 0.0 && cy < height as f64) {
            return Err(EvsplatError::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Perspective projection of a camera-frame point (z > 0) to pixels.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Back-project pixel `(px, py)` at `depth` into the camera frame.
    #[inline]
    pub fn back_project(&self, px: f64, py: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px - self.cx) / self.fx * depth,
            (py - self.cy) / self.fy * depth,
            depth,
        )
    }
}
