//! Frame-resolution binary masks and multi-instance label maps.

use crate::error::{Error, Result};

/// A single-instance binary mask at frame resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    /// Palette index of the instance this mask belongs to.
    pub instance: u8,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, instance: u8) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
            instance,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        instance: u8,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut mask = Self::new(width, height, instance);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    mask.data[r * width + c] = 1;
                }
            }
        }
        mask
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel instance ids for one frame; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Instance ids present in the map, ascending, background excluded.
    pub fn instances(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    pub fn instance(&self, id: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| (v == id) as u8).collect(),
            instance: id,
        }
    }

    /// Combines disjoint instance masks into a label map.
    pub fn from_masks(width: usize, height: usize, masks: &[BinaryMask]) -> Result<Self> {
        let mut map = Self::new(width, height);
        for m in masks {
            if m.width != width || m.height != height {
                return Err(Error::ShapeMismatch(format!(
                    "instance {} mask is {}x{}, expected {}x{}",
                    m.instance, m.width, m.height, width, height
                )));
            }
            for (dst, &src) in map.data.iter_mut().zip(&m.data) {
                if src != 0 {
                    if *dst != 0 && *dst != m.instance {
                        return Err(Error::InvalidInput(format!(
                            "instances {} and {} overlap",
                            *dst, m.instance
                        )));
                    }
                    *dst = m.instance;
                }
            }
        }
        Ok(map)
    }
}
