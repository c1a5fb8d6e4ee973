use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRole {
    Tissue,
    Annotation,
    Prediction,
}

impl fmt::Display for MaskRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskRole::Tissue => "tissue",
            MaskRole::Annotation => "annotation",
            MaskRole::Prediction => "prediction",
        })
    }
}

/// Dense binary raster aligned to one pyramid level. Pixels hold 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub level_index: usize,
    pub width: usize,
    pub height: usize,
    pub role: MaskRole,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(level_index: usize, width: usize, height: usize, role: MaskRole) -> Self {
        Self {
            level_index,
            width,
            height,
            role,
            pixels: vec![0; width * height],
        }
    }

    /// Builds a mask from raw values; any nonzero value counts as positive.
    pub fn from_values(
        level_index: usize,
        width: usize,
        height: usize,
        role: MaskRole,
        values: Vec<u8>,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} mask values for {width}x{height}",
                values.len()
            )));
        }
        let pixels = values.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            level_index,
            width,
            height,
            role,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    pub(crate) fn check_aligned(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width
            || self.height != other.height
            || self.level_index != other.level_index
        {
            return Err(Error::DimensionMismatch(format!(
                "{} mask {}x{} @ level {} vs {} mask {}x{} @ level {}",
                self.role,
                self.width,
                self.height,
                self.level_index,
                other.role,
                other.width,
                other.height,
                other.level_index
            )));
        }
        Ok(())
    }

    /// Number of pixels set in both masks.
    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_aligned(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count())
    }

    /// Pixelwise `self <= other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixels.iter().zip(&other.pixels).all(|(a, b)| a <= b)
    }

    /// Next pyramid level: each output pixel is positive iff at least half of
    /// the (existing) 2×2 source pixels are positive.
    pub fn downsample_2x(&self) -> BinaryMask {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = BinaryMask::zeros(self.level_index + 1, w, h, self.role);
        for y in 0..h {
            for x in 0..w {
                let mut on = 0;
                let mut n = 0;
                for sy in 2 * y..(2 * y + 2).min(self.height) {
                    for sx in 2 * x..(2 * x + 2).min(self.width) {
                        on += self.get(sx, sy) as usize;
                        n += 1;
                    }
                }
                out.pixels[y * w + x] = u8::from(2 * on >= n);
            }
        }
        out
    }

    /// Nearest-neighbour resampling onto a `width`×`height` grid covering the
    /// same area.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.level_index, width, height, self.role);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for x in 0..width {
                let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                out.pixels[y * width + x] = self.pixels[src_y * self.width + src_x];
            }
        }
        out
    }

    /// Stored as 8-bit grayscale with 0/255 encoding.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        fsio::write_png(path, self.width, self.height, 1, &data)
    }

    pub fn load_png(path: &Path, level_index: usize, role: MaskRole) -> Result<Self> {
        let (w, h, c, data) = fsio::read_png(path)?;
        let values: Vec<u8> = data
            .chunks_exact(c)
            .map(|px| u8::from(px[0] >= 128))
            .collect();
        Self::from_values(level_index, w, h, role, values)
    }
}

/// Elementwise AND of an annotation with a tissue mask.
pub fn apply_tissue_mask(annotation: &BinaryMask, tissue: &BinaryMask) -> Result<BinaryMask> {
    annotation.check_aligned(tissue)?;
    let pixels = annotation
        .pixels
        .iter()
        .zip(&tissue.pixels)
        .map(|(a, t)| a & t)
        .collect();
    Ok(BinaryMask {
        level_index: annotation.level_index,
        width: annotation.width,
        height: annotation.height,
        role: MaskRole::Annotation,
        pixels,
    })
}
