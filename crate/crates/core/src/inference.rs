//! Whole-slide prediction: non-overlapping tiling at the training
//! resolution, per-tile probability maps, classifier masking in multi-task
//! mode, stitching, and binarization.
//!
//! Tiles live in *target space*, the level raster resampled by `rescale`
//! (identity when the target resolution is a stored level). Reads outside
//! the slide are white; the stitched map is cropped back to the level
//! extent.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::patch_pipeline::bilinear;
use crate::segnet::{forward, ModelBundle, Tensor};
use crate::slide_store::{BinaryMask, MaskRole, RgbRaster, SlidePyramid};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Single,
    Multitask,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Single => "single",
            InferenceMode::Multitask => "multitask",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTile {
    pub row: usize,
    pub col: usize,
    /// Top-left corner in target space.
    pub origin: (usize, usize),
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub level: usize,
    pub rescale: f64,
    pub patch_px: usize,
    pub level_extent: (usize, usize),
    /// Level extent in target space.
    pub extent: (usize, usize),
    pub padded_extent: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub tiles: Vec<GridTile>,
}

impl TileGrid {
    pub fn new(level: usize, rescale: f64, level_extent: (usize, usize), patch_px: usize) -> Self {
        assert!(patch_px > 0 && rescale >= 1.0, "invalid grid parameters");
        let to_target = |n: usize| {
            if rescale == 1.0 {
                n
            } else {
                ((n as f64 / rescale) - 1e-9).ceil().max(1.0) as usize
            }
        };
        let extent = (to_target(level_extent.0), to_target(level_extent.1));
        let cols = extent.0.div_ceil(patch_px);
        let rows = extent.1.div_ceil(patch_px);
        let tiles = (0..rows)
            .flat_map(|row| {
                (0..cols).map(move |col| GridTile {
                    row,
                    col,
                    origin: (col * patch_px, row * patch_px),
                    size: patch_px,
                })
            })
            .collect();
        Self {
            level,
            rescale,
            patch_px,
            level_extent,
            extent,
            padded_extent: (cols * patch_px, rows * patch_px),
            rows,
            cols,
            tiles,
        }
    }
}

pub fn tile_slide(slide: &SlidePyramid, target_um: f64, patch_px: usize) -> Result<TileGrid> {
    let (level, rescale) = slide.level_for_resolution(target_um)?;
    let lvl = slide.level(level)?;
    Ok(TileGrid::new(
        level,
        rescale,
        (lvl.width, lvl.height),
        patch_px,
    ))
}

/// Per-pixel probabilities on a pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Pixel is positive iff its probability is ≥ `threshold`.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> BinaryMask {
    let values = map
        .data
        .iter()
        .map(|&p| u8::from(p as f64 >= threshold))
        .collect();
    BinaryMask::from_values(
        map.level,
        map.width,
        map.height,
        MaskRole::Prediction,
        values,
    )
    .expect("map dimensions are consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub cls_threshold: f64,
    pub batch_size: usize,
}

impl InferenceConfig {
    pub fn new(mode: InferenceMode) -> Self {
        Self {
            mode,
            cls_threshold: DEFAULT_THRESHOLD,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlidePrediction {
    pub mode: InferenceMode,
    pub grid: TileGrid,
    /// Stitched segmentation output without classifier masking.
    pub raw: ProbabilityMap,
    /// Multi-task map: tiles whose classifier output is below threshold are
    /// zeroed.
    pub masked: Option<ProbabilityMap>,
    /// Classifier output per grid tile (row-major), when the model has one.
    pub tile_cls: Option<Vec<f32>>,
}

impl SlidePrediction {
    /// The map for the configured mode.
    pub fn map(&self) -> &ProbabilityMap {
        match self.mode {
            InferenceMode::Single => &self.raw,
            InferenceMode::Multitask => self.masked.as_ref().expect("multitask map"),
        }
    }
}

fn check_mode(model: &ModelBundle, mode: InferenceMode) -> Result<()> {
    if mode == InferenceMode::Multitask && !model.net.has_classifier() {
        return Err(Error::InvalidConfig(
            "multitask inference needs a model with a classifier head".into(),
        ));
    }
    Ok(())
}

fn tile_image(raster: &RgbRaster, grid: &TileGrid, tile: &GridTile, out: &mut [f32]) {
    let p = grid.patch_px;
    let s = grid.rescale;
    for j in 0..p {
        for i in 0..p {
            let (tx, ty) = (tile.origin.0 + i, tile.origin.1 + j);
            let px = if s == 1.0 {
                let q = raster.pixel_or_background(tx as i64, ty as i64);
                [q[0] as f32, q[1] as f32, q[2] as f32]
            } else {
                bilinear(raster, tx as f64 * s, ty as f64 * s)
            };
            for c in 0..3 {
                out[c * p * p + j * p + i] = px[c] / 255.0;
            }
        }
    }
}

/// Predicts every grid tile of `raster` (the grid's level) in the given
/// tile order and stitches the result. The output does not depend on
/// `order` or on batch composition.
pub fn predict_raster(
    model: &ModelBundle,
    raster: &RgbRaster,
    grid: &TileGrid,
    config: &InferenceConfig,
    order: Option<&[usize]>,
) -> Result<SlidePrediction> {
    check_mode(model, config.mode)?;
    if grid.patch_px != model.spec.input_px {
        return Err(Error::ShapeMismatch(format!(
            "grid tiles are {} px, model expects {}",
            grid.patch_px, model.spec.input_px
        )));
    }
    if (raster.width, raster.height) != grid.level_extent {
        return Err(Error::DimensionMismatch(format!(
            "raster {}x{} vs grid level {}x{}",
            raster.width, raster.height, grid.level_extent.0, grid.level_extent.1
        )));
    }
    let default_order: Vec<usize> = (0..grid.tiles.len()).collect();
    let order = order.unwrap_or(&default_order);
    let mut seen = vec![false; grid.tiles.len()];
    for &t in order {
        if t >= seen.len() || std::mem::replace(&mut seen[t], true) {
            return Err(Error::InvalidConfig(
                "tile order is not a permutation".into(),
            ));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidConfig(
            "tile order is not a permutation".into(),
        ));
    }

    let p = grid.patch_px;
    let (pw, ph) = grid.padded_extent;
    let mut target = vec![0f32; pw * ph];
    let mut cls = model
        .net
        .has_classifier()
        .then(|| vec![0f32; grid.tiles.len()]);
    for chunk in order.chunks(config.batch_size.max(1)) {
        let mut batch = Tensor::zeros([chunk.len(), 3, p, p]);
        let item_len = 3 * p * p;
        for (b, &t) in chunk.iter().enumerate() {
            tile_image(
                raster,
                grid,
                &grid.tiles[t],
                &mut batch.data[b * item_len..(b + 1) * item_len],
            );
        }
        let out = forward(model, &batch)?;
        for (b, &t) in chunk.iter().enumerate() {
            let tile = &grid.tiles[t];
            let seg = out.seg.item(b);
            for j in 0..p {
                let row = (tile.origin.1 + j) * pw + tile.origin.0;
                target[row..row + p].copy_from_slice(&seg[j * p..(j + 1) * p]);
            }
            if let (Some(c), Some(oc)) = (cls.as_mut(), out.cls.as_ref()) {
                c[t] = oc[b];
            }
        }
    }

    let masked_target = (config.mode == InferenceMode::Multitask).then(|| {
        let c = cls.as_ref().expect("checked classifier");
        let mut m = target.clone();
        for (t, tile) in grid.tiles.iter().enumerate() {
            if (c[t] as f64) < config.cls_threshold {
                for j in 0..p {
                    let row = (tile.origin.1 + j) * pw + tile.origin.0;
                    m[row..row + p].fill(0.0);
                }
            }
        }
        m
    });
    let raw = to_level(grid, &target);
    let masked = masked_target.map(|m| to_level(grid, &m));
    Ok(SlidePrediction {
        mode: config.mode,
        grid: grid.clone(),
        raw,
        masked,
        tile_cls: cls,
    })
}

/// Crops (and, off the pyramid grid, nearest-resamples) a padded
/// target-space map to the level extent.
fn to_level(grid: &TileGrid, target: &[f32]) -> ProbabilityMap {
    let (lw, lh) = grid.level_extent;
    let pw = grid.padded_extent.0;
    let s = grid.rescale;
    let mut data = vec![0f32; lw * lh];
    if s == 1.0 {
        for y in 0..lh {
            data[y * lw..(y + 1) * lw].copy_from_slice(&target[y * pw..y * pw + lw]);
        }
    } else {
        let (ew, eh) = grid.extent;
        for y in 0..lh {
            let ty = ((y as f64 / s).round() as usize).min(eh - 1);
            for x in 0..lw {
                let tx = ((x as f64 / s).round() as usize).min(ew - 1);
                data[y * lw + x] = target[ty * pw + tx];
            }
        }
    }
    ProbabilityMap {
        level: grid.level,
        width: lw,
        height: lh,
        data,
    }
}

/// Tiles, predicts and stitches one slide at `target_um`.
pub fn predict_slide_full(
    model: &ModelBundle,
    slide: &SlidePyramid,
    target_um: f64,
    config: &InferenceConfig,
) -> Result<SlidePrediction> {
    check_mode(model, config.mode)?;
    let grid = tile_slide(slide, target_um, model.spec.input_px)?;
    let raster = slide.read_level(grid.level)?;
    predict_raster(model, &raster, &grid, config, None)
}

pub fn predict_slide(
    model: &ModelBundle,
    slide: &SlidePyramid,
    target_um: f64,
    mode: InferenceMode,
) -> Result<ProbabilityMap> {
    let pred = predict_slide_full(model, slide, target_um, &InferenceConfig::new(mode))?;
    Ok(pred.map().clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub slide_id: String,
    pub fingerprint: String,
    pub mode: InferenceMode,
    pub resolution_um: f64,
    pub threshold: f64,
    pub cls_threshold: f64,
    pub level: usize,
    pub width: usize,
    pub height: usize,
}

pub fn prediction_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.png"))
}

/// Writes `<dir>/<slide_id>.png` and its `.json` sidecar.
pub fn write_prediction(dir: &Path, meta: &PredictionMeta, mask: &BinaryMask) -> Result<PathBuf> {
    let path = prediction_path(dir, &meta.slide_id);
    mask.save_png(&path)?;
    fsio::write_json(&path.with_extension("json"), meta)?;
    Ok(path)
}

pub fn read_prediction(dir: &Path, slide_id: &str) -> Result<(BinaryMask, PredictionMeta)> {
    let path = prediction_path(dir, slide_id);
    let sidecar = path.with_extension("json");
    if !path.is_file() || !sidecar.is_file() {
        return Err(Error::MissingPrediction(slide_id.to_string()));
    }
    let meta: PredictionMeta = fsio::read_json(&sidecar)?;
    let mask = BinaryMask::load_png(&path, meta.level, MaskRole::Prediction)?;
    if (mask.width, mask.height) != (meta.width, meta.height) {
        return Err(Error::DimensionMismatch(format!(
            "prediction for {slide_id} is {}x{}, sidecar says {}x{}",
            mask.width, mask.height, meta.width, meta.height
        )));
    }
    Ok((mask, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_model, ArchitectureSpec};
    use crate::slide_store::SlideLabel;
    use rand::{Rng, SeedableRng};

    fn tiny_model(classifier: bool) -> ModelBundle {
        let spec = ArchitectureSpec {
            input_px: 32,
            stage_widths: vec![4, 4, 4, 4, 4],
            decoder_widths: vec![4, 4, 4, 4, 4],
            classifier,
            init_gain: 1.0,
            ..ArchitectureSpec::default()
        };
        build_model(&spec, 5).unwrap()
    }

    fn noise_raster(w: usize, h: usize, seed: u64) -> RgbRaster {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
        RgbRaster::from_raw(w, h, data).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = TileGrid::new(0, 1.0, (1024, 1024), 256);
        assert_eq!((g.rows, g.cols, g.tiles.len()), (4, 4, 16));
        let g = TileGrid::new(0, 1.0, (1000, 1000), 256);
        assert_eq!((g.tiles.len(), g.padded_extent), (16, (1024, 1024)));
        assert_eq!(TileGrid::new(0, 1.0, (256, 256), 256).tiles.len(), 1);
        let g = TileGrid::new(0, 1.0, (300, 10), 256);
        assert_eq!((g.rows, g.cols), (1, 2));
        assert_eq!(g.tiles[1].origin, (256, 0));
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let map = |v: f32| ProbabilityMap {
            level: 0,
            width: 4,
            height: 2,
            data: vec![v; 8],
        };
        assert_eq!(binarize(&map(0.49), 0.5).count(), 0);
        assert_eq!(binarize(&map(0.5), 0.5).count(), 8);
    }

    #[test]
    fn stitching_is_order_independent_and_cropped() {
        let model = tiny_model(true);
        let raster = noise_raster(70, 45, 1);
        let grid = TileGrid::new(0, 1.0, (70, 45), 32);
        let cfg = InferenceConfig {
            batch_size: 4,
            ..InferenceConfig::new(InferenceMode::Multitask)
        };
        let a = predict_raster(&model, &raster, &grid, &cfg, None).unwrap();
        let mut order: Vec<usize> = (0..grid.tiles.len()).rev().collect();
        order.swap(0, 2);
        let b = predict_raster(&model, &raster, &grid, &cfg, Some(&order)).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.masked, b.masked);
        assert_eq!((a.raw.width, a.raw.height), (70, 45));
        let bad = [0usize, 0, 1, 2, 3, 4];
        assert!(predict_raster(&model, &raster, &grid, &cfg, Some(&bad)).is_err());
    }

    #[test]
    fn multitask_masking_zeroes_rejected_tiles() {
        let model = tiny_model(true);
        let raster = noise_raster(64, 64, 2);
        let grid = TileGrid::new(0, 1.0, (64, 64), 32);
        let run = |thr: f64| {
            let cfg = InferenceConfig {
                cls_threshold: thr,
                ..InferenceConfig::new(InferenceMode::Multitask)
            };
            predict_raster(&model, &raster, &grid, &cfg, None).unwrap()
        };
        let keep = run(0.0);
        assert_eq!(keep.masked.as_ref().unwrap(), &keep.raw);
        let drop = run(1.1);
        assert!(drop.masked.as_ref().unwrap().data.iter().all(|&v| v == 0.0));
        let mid = run(0.5);
        let cls = mid.tile_cls.as_ref().unwrap();
        for (t, tile) in grid.tiles.iter().enumerate() {
            let (x, y) = tile.origin;
            let m = mid.masked.as_ref().unwrap().get(x + 3, y + 3);
            if cls[t] < 0.5 {
                assert_eq!(m, 0.0);
            } else {
                assert_eq!(m, mid.raw.get(x + 3, y + 3));
            }
        }
    }

    #[test]
    fn multitask_needs_classifier() {
        let model = tiny_model(false);
        let slide = SlidePyramid::in_memory(
            "s",
            "p",
            SlideLabel::Negative,
            noise_raster(64, 64, 3),
            1.0,
            1,
        )
        .unwrap();
        let e = predict_slide(&model, &slide, 1.0, InferenceMode::Multitask).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)));
        let map = predict_slide(&model, &slide, 1.0, InferenceMode::Single).unwrap();
        assert_eq!((map.width, map.height), (64, 64));
    }

    #[test]
    fn off_grid_resolution_maps_back_to_level() {
        let model = tiny_model(false);
        let slide = SlidePyramid::in_memory(
            "s",
            "p",
            SlideLabel::Negative,
            noise_raster(100, 60, 4),
            1.0,
            1,
        )
        .unwrap();
        let grid = tile_slide(&slide, 1.5, 32).unwrap();
        assert_eq!(grid.extent, (67, 40));
        let map = predict_slide(&model, &slide, 1.5, InferenceMode::Single).unwrap();
        assert_eq!((map.width, map.height), (100, 60));
    }

    #[test]
    fn prediction_roundtrip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mask =
            BinaryMask::from_values(2, 3, 2, MaskRole::Prediction, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let meta = PredictionMeta {
            slide_id: "slide_001".into(),
            fingerprint: "f".into(),
            mode: InferenceMode::Single,
            resolution_um: 15.56,
            threshold: 0.5,
            cls_threshold: 0.5,
            level: 2,
            width: 3,
            height: 2,
        };
        write_prediction(dir.path(), &meta, &mask).unwrap();
        let (m, md) = read_prediction(dir.path(), "slide_001").unwrap();
        assert_eq!((m, md), (mask, meta));
        let e = read_prediction(dir.path(), "slide_002").unwrap_err();
        assert!(e.to_string().contains("slide_002"));
    }
}
