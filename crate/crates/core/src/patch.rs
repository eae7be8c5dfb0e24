//! Square image patches resampled from frames, with the affine map back to
//! frame pixels.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Maps patch pixels to frame pixels: a square of side `side` frame pixels
/// centered at `(cx, cy)` resampled to `size` x `size` patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMapping {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub size: usize,
}

impl CropMapping {
    /// Frame pixels per patch pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.size as f64
    }

    fn half(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    pub fn to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        let s = self.scale();
        (self.cx + (px - self.half()) * s, self.cy + (py - self.half()) * s)
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x - self.cx) / s + self.half(), (y - self.cy) / s + self.half())
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        let s = self.scale();
        BBox { cx, cy, w: b.w * s, h: b.h * s }
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_patch(b.cx, b.cy);
        let s = self.scale();
        BBox { cx, cy, w: b.w / s, h: b.h / s }
    }

    /// The patch extent expressed in frame coordinates.
    pub fn frame_extent(&self) -> BBox {
        BBox { cx: self.cx, cy: self.cy, w: self.side, h: self.side }
    }
}

/// A `size` x `size` RGB patch, row-major with interleaved channels,
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f64>,
    pub mapping: CropMapping,
}

impl Patch {
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}
