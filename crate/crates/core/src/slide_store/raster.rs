use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;

/// Background colour for out-of-bounds reads and tile padding.
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "rgb buffer of {} bytes for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel lookup that returns the background colour outside the raster.
    #[inline]
    pub fn pixel_or_background(&self, x: i64, y: i64) -> [u8; 3] {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            BACKGROUND
        } else {
            self.pixel(x as usize, y as usize)
        }
    }

    /// Copies a `w`×`h` window starting at `origin`; pixels outside the raster
    /// come back as background white.
    pub fn crop_padded(&self, origin: (i64, i64), size: (usize, usize)) -> RgbRaster {
        let (w, h) = size;
        let mut out = RgbRaster::filled(w, h, BACKGROUND);
        self.copy_into(&mut out, origin);
        out
    }

    /// Copies the overlap of `self` with the window of `dst` placed at
    /// `origin` (in `self` coordinates).
    pub(crate) fn copy_into(&self, dst: &mut RgbRaster, origin: (i64, i64)) {
        let (ox, oy) = origin;
        let x0 = ox.max(0);
        let y0 = oy.max(0);
        let x1 = (ox + dst.width as i64).min(self.width as i64);
        let y1 = (oy + dst.height as i64).min(self.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let run = (x1 - x0) as usize * 3;
        for y in y0..y1 {
            let src = (y as usize * self.width + x0 as usize) * 3;
            let dy = (y - oy) as usize;
            let dx = (x0 - ox) as usize;
            let dst_i = (dy * dst.width + dx) * 3;
            dst.data[dst_i..dst_i + run].copy_from_slice(&self.data[src..src + run]);
        }
    }

    /// Halves both dimensions (rounding up) by averaging each 2×2 block over
    /// the pixels that exist, rounding half up.
    pub fn downsample_2x(&self) -> RgbRaster {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = RgbRaster::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                let mut sum = [0u32; 3];
                let mut n = 0u32;
                for sy in 2 * y..(2 * y + 2).min(self.height) {
                    for sx in 2 * x..(2 * x + 2).min(self.width) {
                        let p = self.pixel(sx, sy);
                        for c in 0..3 {
                            sum[c] += p[c] as u32;
                        }
                        n += 1;
                    }
                }
                let px = sum.map(|s| ((s + n / 2) / n) as u8);
                out.set_pixel(x, y, px);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fsio::write_png(path, self.width, self.height, 3, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, c, data) = fsio::read_png(path)?;
        let data = match c {
            3 => data,
            4 => data
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            1 => data.iter().flat_map(|&v| [v, v, v]).collect(),
            2 => data
                .chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0]])
                .collect(),
            _ => unreachable!(),
        };
        Self::from_raw(w, h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_pads_with_white() {
        let r = RgbRaster::filled(4, 4, [10, 20, 30]);
        let c = r.crop_padded((-1, -1), (3, 3));
        assert_eq!(c.pixel(0, 0), BACKGROUND);
        assert_eq!(c.pixel(2, 0), BACKGROUND);
        assert_eq!(c.pixel(1, 1), [10, 20, 30]);
        assert_eq!(c.pixel(2, 2), [10, 20, 30]);
    }

    #[test]
    fn downsample_handles_odd_edges() {
        let mut r = RgbRaster::filled(3, 1, [0, 0, 0]);
        r.set_pixel(2, 0, [200, 100, 50]);
        let d = r.downsample_2x();
        assert_eq!((d.width, d.height), (2, 1));
        assert_eq!(d.pixel(0, 0), [0, 0, 0]);
        assert_eq!(d.pixel(1, 0), [200, 100, 50]);
    }

    #[test]
    fn downsample_rounds_half_up() {
        let mut r = RgbRaster::filled(2, 2, [0, 0, 0]);
        r.set_pixel(0, 0, [1, 2, 3]);
        r.set_pixel(1, 0, [1, 0, 0]);
        let d = r.downsample_2x();
        // (1+1)/4 = 0.5 -> 1, 2/4 -> 1, 3/4 -> 1
        assert_eq!(d.pixel(0, 0), [1, 1, 1]);
    }
}
