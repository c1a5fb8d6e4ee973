use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, MaskRole};
use super::raster::{RgbRaster, BACKGROUND};
use crate::error::{Error, Result};
use crate::fsio;

pub const MANIFEST_FILE: &str = "slide.json";
pub const DEFAULT_TILE_SIZE: usize = 512;

/// Relative tolerance used when comparing resolutions.
const UM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Positive,
    Negative,
}

/// On-disk `slide.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    pub patient_id: String,
    pub label: SlideLabel,
    pub levels: Vec<LevelManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelManifest {
    pub index: usize,
    pub um_per_px: f64,
    pub width: usize,
    pub height: usize,
    pub tile_dir: String,
    pub tile_size: usize,
}

/// Where a level's pixels live.
#[derive(Debug, Clone)]
pub enum TileSource {
    /// `level_<k>/tile_<row>_<col>.png` files of `tile_size`² pixels.
    Directory { dir: PathBuf, tile_size: usize },
    /// Whole level held in memory.
    Memory(Arc<RgbRaster>),
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub index: usize,
    pub um_per_px: f64,
    pub width: usize,
    pub height: usize,
    pub tile_source: TileSource,
}

/// A multi-resolution slide. Pixel data is only read on demand.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub patient_id: String,
    pub label: SlideLabel,
    pub levels: Vec<PyramidLevel>,
    /// Slide directory, when the slide lives on disk.
    pub root: Option<PathBuf>,
}

pub fn tile_file_name(row: usize, col: usize) -> String {
    format!("tile_{row}_{col}.png")
}

pub fn mask_path(root: &Path, role: MaskRole, level: usize) -> PathBuf {
    root.join("masks").join(format!("{role}_level_{level}.png"))
}

/// Opens a slide from its manifest. Only the manifest is read.
pub fn open_slide(manifest_path: &Path) -> Result<SlidePyramid> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: SlideManifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    SlidePyramid::from_manifest(&manifest, &root, manifest_path)
}

impl SlidePyramid {
    fn from_manifest(m: &SlideManifest, root: &Path, path: &Path) -> Result<Self> {
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            message,
        };
        if m.slide_id.is_empty() {
            return Err(schema("slide_id is empty".into()));
        }
        if m.patient_id.is_empty() {
            return Err(schema("patient_id is empty".into()));
        }
        let mut levels = Vec::with_capacity(m.levels.len());
        for (i, l) in m.levels.iter().enumerate() {
            if l.index != i {
                return Err(schema(format!(
                    "level at position {i} has index {}",
                    l.index
                )));
            }
            if l.tile_size == 0 {
                return Err(schema(format!("level {i}: tile_size must be positive")));
            }
            levels.push(PyramidLevel {
                index: l.index,
                um_per_px: l.um_per_px,
                width: l.width,
                height: l.height,
                tile_source: TileSource::Directory {
                    dir: root.join(&l.tile_dir),
                    tile_size: l.tile_size,
                },
            });
        }
        let slide = SlidePyramid {
            slide_id: m.slide_id.clone(),
            patient_id: m.patient_id.clone(),
            label: m.label,
            levels,
            root: Some(root.to_path_buf()),
        };
        slide.validate().map_err(|e| match e {
            Error::Schema { message, .. } => schema(message),
            other => other,
        })?;
        Ok(slide)
    }

    /// Builds an in-memory slide whose coarser levels are 2× downsamples of
    /// `base`.
    pub fn in_memory(
        slide_id: &str,
        patient_id: &str,
        label: SlideLabel,
        base: RgbRaster,
        base_um: f64,
        n_levels: usize,
    ) -> Result<Self> {
        let rasters = build_levels(base, n_levels);
        let levels = rasters
            .into_iter()
            .enumerate()
            .map(|(k, r)| PyramidLevel {
                index: k,
                um_per_px: base_um * (1u64 << k) as f64,
                width: r.width,
                height: r.height,
                tile_source: TileSource::Memory(Arc::new(r)),
            })
            .collect();
        let slide = SlidePyramid {
            slide_id: slide_id.to_string(),
            patient_id: patient_id.to_string(),
            label,
            levels,
            root: None,
        };
        slide.validate()?;
        Ok(slide)
    }

    /// Checks the pyramid invariants: strictly increasing power-of-two
    /// resolutions and ceil-halving dimensions.
    pub fn validate(&self) -> Result<()> {
        let schema = |message: String| Error::Schema {
            path: self.root.clone().unwrap_or_default(),
            message,
        };
        let Some(base) = self.levels.first() else {
            return Err(schema("slide has no levels".into()));
        };
        for l in &self.levels {
            if !(l.um_per_px.is_finite() && l.um_per_px > 0.0) {
                return Err(schema(format!("level {}: um_per_px must be > 0", l.index)));
            }
            if l.width == 0 || l.height == 0 {
                return Err(schema(format!("level {}: empty dimensions", l.index)));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].um_per_px <= pair[0].um_per_px {
                return Err(Error::LevelOrder(format!(
                    "level {} has {} um/px after {} um/px",
                    pair[1].index, pair[1].um_per_px, pair[0].um_per_px
                )));
            }
        }
        for l in &self.levels[1..] {
            let ratio = l.um_per_px / base.um_per_px;
            let exp = ratio.log2().round();
            if exp < 1.0 || (ratio - exp.exp2()).abs() > 1e-6 * ratio {
                return Err(Error::LevelDimensions(format!(
                    "level {} resolution {} is not a power-of-two multiple of {}",
                    l.index, l.um_per_px, base.um_per_px
                )));
            }
            let f = 1usize << exp as u32;
            let (ew, eh) = (base.width.div_ceil(f), base.height.div_ceil(f));
            if (l.width, l.height) != (ew, eh) {
                return Err(Error::LevelDimensions(format!(
                    "level {} is {}x{}, expected {ew}x{eh}",
                    l.index, l.width, l.height
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, level: usize) -> Result<&PyramidLevel> {
        self.levels.get(level).ok_or(Error::NoSuchLevel {
            level,
            available: self.levels.len(),
        })
    }

    /// Reads a `w`×`h` RGB window at `origin`; out-of-bounds pixels are white.
    pub fn read_region(
        &self,
        level: usize,
        origin: (i64, i64),
        size: (usize, usize),
    ) -> Result<RgbRaster> {
        let lvl = self.level(level)?;
        match &lvl.tile_source {
            TileSource::Memory(r) => Ok(r.crop_padded(origin, size)),
            TileSource::Directory { dir, tile_size } => {
                let mut out = RgbRaster::filled(size.0, size.1, BACKGROUND);
                let ts = *tile_size as i64;
                let (ox, oy) = origin;
                let x0 = ox.max(0);
                let y0 = oy.max(0);
                let x1 = (ox + size.0 as i64).min(lvl.width as i64);
                let y1 = (oy + size.1 as i64).min(lvl.height as i64);
                if x0 >= x1 || y0 >= y1 {
                    return Ok(out);
                }
                for row in (y0 / ts)..=((y1 - 1) / ts) {
                    for col in (x0 / ts)..=((x1 - 1) / ts) {
                        let path = dir.join(tile_file_name(row as usize, col as usize));
                        let tile = RgbRaster::load_png(&path)?;
                        // Tile padding beyond the level extent must not leak in.
                        let valid_w = (lvl.width as i64 - col * ts).min(ts) as usize;
                        let valid_h = (lvl.height as i64 - row * ts).min(ts) as usize;
                        let tile = if (valid_w, valid_h) != (tile.width, tile.height) {
                            tile.crop_padded((0, 0), (valid_w, valid_h))
                        } else {
                            tile
                        };
                        tile.copy_into_window(&mut out, (col * ts - ox, row * ts - oy));
                    }
                }
                Ok(out)
            }
        }
    }

    /// Whole level as one raster.
    pub fn read_level(&self, level: usize) -> Result<RgbRaster> {
        let l = self.level(level)?;
        self.read_region(level, (0, 0), (l.width, l.height))
    }

    /// Coarsest level whose resolution is at least as fine as `target_um`,
    /// together with the rescale factor `target_um / um_per_px` in [1, 2).
    pub fn level_for_resolution(&self, target_um: f64) -> Result<(usize, f64)> {
        let finest = self.levels[0].um_per_px;
        if !(target_um.is_finite() && target_um >= finest * (1.0 - UM_TOL)) {
            return Err(Error::ResolutionTooFine {
                target_um,
                finest_um: finest,
            });
        }
        let level = self
            .levels
            .iter()
            .rposition(|l| l.um_per_px <= target_um * (1.0 + UM_TOL))
            .unwrap_or(0);
        let mut rescale = target_um / self.levels[level].um_per_px;
        if (rescale - 1.0).abs() <= UM_TOL {
            rescale = 1.0;
        }
        Ok((level, rescale))
    }

    pub fn compute_tissue_mask(
        &self,
        level: usize,
        detector: &super::TissueDetector,
    ) -> Result<BinaryMask> {
        let raster = self.read_level(level)?;
        Ok(detector.detect(&raster, level))
    }

    /// Loads `masks/<role>_level_<k>.png` from the slide directory.
    pub fn load_mask(&self, role: MaskRole, level: usize) -> Result<BinaryMask> {
        let lvl = self.level(level)?;
        let root = self.root.as_ref().ok_or_else(|| {
            Error::MissingFile(PathBuf::from(format!(
                "<in-memory slide {}>/masks/{role}_level_{level}.png",
                self.slide_id
            )))
        })?;
        let mask = BinaryMask::load_png(&mask_path(root, role, level), level, role)?;
        if (mask.width, mask.height) != (lvl.width, lvl.height) {
            return Err(Error::DimensionMismatch(format!(
                "{role} mask is {}x{} but level {level} is {}x{}",
                mask.width, mask.height, lvl.width, lvl.height
            )));
        }
        Ok(mask)
    }

    /// Stored annotation; negative slides without one get an empty mask.
    pub fn load_annotation(&self, level: usize) -> Result<BinaryMask> {
        match self.load_mask(MaskRole::Annotation, level) {
            Err(Error::MissingFile(_)) if self.label == SlideLabel::Negative => {
                let lvl = self.level(level)?;
                Ok(BinaryMask::zeros(
                    level,
                    lvl.width,
                    lvl.height,
                    MaskRole::Annotation,
                ))
            }
            other => other,
        }
    }

    pub fn save_mask(&self, mask: &BinaryMask) -> Result<PathBuf> {
        let root = self.root.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("slide {} has no directory", self.slide_id))
        })?;
        let lvl = self.level(mask.level_index)?;
        if (mask.width, mask.height) != (lvl.width, lvl.height) {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs level {} {}x{}",
                mask.width, mask.height, mask.level_index, lvl.width, lvl.height
            )));
        }
        let path = mask_path(root, mask.role, mask.level_index);
        mask.save_png(&path)?;
        Ok(path)
    }

    pub fn manifest(&self) -> SlideManifest {
        SlideManifest {
            slide_id: self.slide_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
            levels: self
                .levels
                .iter()
                .map(|l| LevelManifest {
                    index: l.index,
                    um_per_px: l.um_per_px,
                    width: l.width,
                    height: l.height,
                    tile_dir: format!("level_{}", l.index),
                    tile_size: match &l.tile_source {
                        TileSource::Directory { tile_size, .. } => *tile_size,
                        TileSource::Memory(_) => DEFAULT_TILE_SIZE,
                    },
                })
                .collect(),
        }
    }
}

impl RgbRaster {
    /// Pastes `self` into `dst` at `offset` (in `dst` coordinates), clipped.
    fn copy_into_window(&self, dst: &mut RgbRaster, offset: (i64, i64)) {
        let (ox, oy) = offset;
        for y in 0..self.height as i64 {
            let dy = y + oy;
            if dy < 0 || dy >= dst.height as i64 {
                continue;
            }
            let x0 = (-ox).max(0);
            let x1 = (dst.width as i64 - ox).min(self.width as i64);
            if x0 >= x1 {
                continue;
            }
            let src = (y as usize * self.width + x0 as usize) * 3;
            let di = (dy as usize * dst.width + (x0 + ox) as usize) * 3;
            let n = (x1 - x0) as usize * 3;
            dst.data[di..di + n].copy_from_slice(&self.data[src..src + n]);
        }
    }
}

/// Level 0 plus `n_levels - 1` successive 2× mean-pool downsamples.
pub fn build_levels(base: RgbRaster, n_levels: usize) -> Vec<RgbRaster> {
    let mut levels = vec![base];
    for _ in 1..n_levels.max(1) {
        let next = levels.last().unwrap().downsample_2x();
        levels.push(next);
    }
    levels
}

/// Writes tiles for every level plus `slide.json` into `dir`, and reopens the
/// result from disk.
pub fn write_slide(
    dir: &Path,
    slide_id: &str,
    patient_id: &str,
    label: SlideLabel,
    levels: &[RgbRaster],
    base_um: f64,
    tile_size: usize,
) -> Result<SlidePyramid> {
    if tile_size == 0 {
        return Err(Error::InvalidConfig("tile_size must be positive".into()));
    }
    let mut manifest = SlideManifest {
        slide_id: slide_id.to_string(),
        patient_id: patient_id.to_string(),
        label,
        levels: Vec::new(),
    };
    for (k, raster) in levels.iter().enumerate() {
        let tile_dir = format!("level_{k}");
        let level_dir = dir.join(&tile_dir);
        fsio::create_dir_all(&level_dir)?;
        for row in 0..raster.height.div_ceil(tile_size) {
            for col in 0..raster.width.div_ceil(tile_size) {
                let tile = raster.crop_padded(
                    ((col * tile_size) as i64, (row * tile_size) as i64),
                    (tile_size, tile_size),
                );
                tile.save_png(&level_dir.join(tile_file_name(row, col)))?;
            }
        }
        manifest.levels.push(LevelManifest {
            index: k,
            um_per_px: base_um * (1u64 << k) as f64,
            width: raster.width,
            height: raster.height,
            tile_dir,
            tile_size,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    fsio::write_json(&path, &manifest)?;
    open_slide(&path)
}
