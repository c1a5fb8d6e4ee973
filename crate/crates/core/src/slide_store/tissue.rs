//! Tissue/background separation by HSV thresholding.
//!
//! A pixel is tissue when it is either saturated enough (stained) or dark
//! enough; unstained glass is bright and grey.

use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, MaskRole};
use super::raster::RgbRaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueDetector {
    /// Minimum HSV saturation in [0, 1].
    pub s_min: f64,
    /// Maximum HSV value (brightness) in [0, 1].
    pub v_max: f64,
}

impl Default for TissueDetector {
    fn default() -> Self {
        Self {
            s_min: 0.07,
            v_max: 0.82,
        }
    }
}

impl TissueDetector {
    #[inline]
    pub fn is_tissue(&self, rgb: [u8; 3]) -> bool {
        let max = rgb.iter().copied().max().unwrap_or(0) as f64;
        let min = rgb.iter().copied().min().unwrap_or(0) as f64;
        let v = max / 255.0;
        let s = if max > 0.0 { (max - min) / max } else { 0.0 };
        s >= self.s_min || v <= self.v_max
    }

    pub fn detect(&self, raster: &RgbRaster, level_index: usize) -> BinaryMask {
        let values = raster
            .data
            .chunks_exact(3)
            .map(|p| u8::from(self.is_tissue([p[0], p[1], p[2]])))
            .collect();
        BinaryMask::from_values(
            level_index,
            raster.width,
            raster.height,
            MaskRole::Tissue,
            values,
        )
        .expect("raster dimensions are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_is_background_black_is_tissue() {
        let d = TissueDetector::default();
        let white = RgbRaster::filled(8, 8, [255, 255, 255]);
        assert!(d.detect(&white, 0).is_empty());
        let black = RgbRaster::filled(8, 8, [0, 0, 0]);
        assert_eq!(d.detect(&black, 0).count(), 64);
    }

    #[test]
    fn thresholds_are_inclusive() {
        let d = TissueDetector {
            s_min: 0.5,
            v_max: 0.0,
        };
        // saturation exactly 0.5
        assert!(d.is_tissue([200, 100, 100]));
        assert!(!d.is_tissue([200, 101, 101]));
        // light grey: low saturation, bright
        assert!(!TissueDetector::default().is_tissue([230, 230, 230]));
        // mid grey: dark enough
        assert!(TissueDetector::default().is_tissue([200, 200, 200]));
    }
}
