//! Multi-resolution slide storage.
//!
//! A slide is a directory holding a `slide.json` manifest, one
//! `level_<k>/` directory of fixed-size PNG tiles per pyramid level, and a
//! `masks/` directory of `<role>_level_<k>.png` binary masks (0/255).
//!
//! ```text
//! slide_0007/
//!   slide.json
//!   level_0/tile_0_0.png  tile_0_1.png ...
//!   level_1/...
//!   masks/tissue_level_0.png  annotation_level_0.png ...
//! ```
//!
//! Slides are read-only after [`open_slide`]; every read goes back to the
//! tiles, so concurrent readers never share mutable state.

mod mask;
mod pyramid;
mod raster;
mod tissue;

pub use mask::{apply_tissue_mask, BinaryMask, MaskRole};
pub use pyramid::{
    build_levels, mask_path, open_slide, tile_file_name, write_slide, LevelManifest, PyramidLevel,
    SlideLabel, SlideManifest, SlidePyramid, TileSource, DEFAULT_TILE_SIZE, MANIFEST_FILE,
};
pub use raster::{RgbRaster, BACKGROUND};
pub use tissue::TissueDetector;

use crate::error::{Error, Result};

/// Ingests a level-0 annotation: for every pyramid level, detects tissue,
/// downsamples the annotation, masks it with the tissue, and stores both
/// masks in the slide directory.
pub fn ingest_annotation(
    slide: &SlidePyramid,
    annotation_level0: &BinaryMask,
    detector: &TissueDetector,
) -> Result<()> {
    let base = slide.level(0)?;
    if (annotation_level0.width, annotation_level0.height) != (base.width, base.height) {
        return Err(Error::DimensionMismatch(format!(
            "annotation {}x{} vs level 0 {}x{}",
            annotation_level0.width, annotation_level0.height, base.width, base.height
        )));
    }
    let mut raw = annotation_level0.clone();
    raw.level_index = 0;
    for level in 0..slide.levels.len() {
        if level > 0 {
            raw = raw.downsample_2x();
        }
        let tissue = slide.compute_tissue_mask(level, detector)?;
        let annotation = apply_tissue_mask(&raw, &tissue)?;
        slide.save_mask(&tissue)?;
        slide.save_mask(&annotation)?;
    }
    Ok(())
}
