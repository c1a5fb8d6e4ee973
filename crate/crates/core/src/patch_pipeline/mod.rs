//! Class-balanced patch sampling at a target resolution.
//!
//! A draw picks the class first (cancer with probability `class_balance`),
//! then a slide that has pixels of that class, then a patch centre uniformly
//! among those pixels. The patch is cut from the level returned by
//! [`SlidePyramid::level_for_resolution`], resampled bilinearly (image) or
//! by nearest neighbour (mask), labelled under the active criterion, and
//! augmented.

mod augment;
mod label;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment, contrast_brightness, flip_horizontal, flip_vertical, gaussian_blur, shift_hsv,
    AugmentationConfig,
};
pub use label::{assign_label_cl1, assign_label_cl2, LabelCriterion};

use crate::error::{Error, Result};
use crate::slide_store::{BinaryMask, MaskRole, RgbRaster, SlidePyramid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampledClass {
    Normal,
    Cancer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSource {
    pub slide_id: String,
    pub level: usize,
    /// Top-left corner of the patch in level pixels.
    pub origin: (f64, f64),
    pub rescale: f64,
    /// Sampled centre pixel in level coordinates.
    pub center: (usize, usize),
}

/// One training unit: a `3×P×P` image in [0, 1] (channel-major), its aligned
/// `P×P` binary mask and the patch label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch_px: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub label: u8,
    pub criterion: LabelCriterion,
    pub source: PatchSource,
    pub sampled_class: SampledClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub target_um: f64,
    pub patch_px: usize,
    /// Probability of drawing the cancer class.
    pub class_balance: f64,
    pub label_criterion: LabelCriterion,
    pub augmentations: AugmentationConfig,
    pub seed: u64,
    /// Independent sampling streams; stream `w` is seeded with `seed ^ w`.
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            target_um: 15.56,
            patch_px: 256,
            class_balance: 0.5,
            label_criterion: LabelCriterion::Cl1,
            augmentations: AugmentationConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.class_balance) {
            return bad(format!(
                "class_balance {} outside [0, 1]",
                self.class_balance
            ));
        }
        if self.patch_px < 32 || !self.patch_px.is_multiple_of(32) {
            return bad(format!(
                "patch_px {} must be ≥ 32 and divisible by 32",
                self.patch_px
            ));
        }
        if !(self.target_um.is_finite() && self.target_um > 0.0) {
            return bad(format!("target_um {} must be positive", self.target_um));
        }
        if self.workers == 0 {
            return bad("workers must be ≥ 1".into());
        }
        self.augmentations.validate().map_err(Error::InvalidConfig)
    }
}

/// A slide prepared for sampling at one resolution: the level raster, its
/// tissue and tissue-masked annotation, and per-class centre candidates.
#[derive(Debug, Clone)]
pub struct SamplingSource {
    pub slide_id: String,
    pub level: usize,
    pub rescale: f64,
    pub raster: RgbRaster,
    pub tissue: BinaryMask,
    pub annotation: BinaryMask,
    cancer: Vec<u32>,
    normal: Vec<u32>,
}

impl SamplingSource {
    /// Loads the resolved level and its stored masks. Negative slides
    /// without an annotation mask get an empty one.
    pub fn load(slide: &SlidePyramid, target_um: f64) -> Result<Self> {
        let (level, rescale) = slide.level_for_resolution(target_um)?;
        let raster = slide.read_level(level)?;
        let tissue = slide.load_mask(MaskRole::Tissue, level)?;
        let annotation = slide.load_annotation(level)?;
        Self::from_parts(&slide.slide_id, level, rescale, raster, tissue, annotation)
    }

    pub fn from_parts(
        slide_id: &str,
        level: usize,
        rescale: f64,
        raster: RgbRaster,
        tissue: BinaryMask,
        annotation: BinaryMask,
    ) -> Result<Self> {
        annotation.check_aligned(&tissue)?;
        if (raster.width, raster.height) != (tissue.width, tissue.height) {
            return Err(Error::DimensionMismatch(format!(
                "raster {}x{} vs masks {}x{}",
                raster.width, raster.height, tissue.width, tissue.height
            )));
        }
        let mut cancer = Vec::new();
        let mut normal = Vec::new();
        for (i, (&a, &t)) in annotation.pixels().iter().zip(tissue.pixels()).enumerate() {
            if a != 0 {
                cancer.push(i as u32);
            } else if t != 0 {
                normal.push(i as u32);
            }
        }
        Ok(Self {
            slide_id: slide_id.to_string(),
            level,
            rescale,
            raster,
            tissue,
            annotation,
            cancer,
            normal,
        })
    }

    fn candidates(&self, class: SampledClass) -> &[u32] {
        match class {
            SampledClass::Cancer => &self.cancer,
            SampledClass::Normal => &self.normal,
        }
    }

    pub fn has_class(&self, class: SampledClass) -> bool {
        !self.candidates(class).is_empty()
    }

    /// Cuts the `p×p` patch whose pixel `(p/2, p/2)` lands on `center`.
    pub fn extract(&self, center: (usize, usize), p: usize) -> (Vec<f32>, Vec<u8>, (f64, f64)) {
        let s = self.rescale;
        let half = (p / 2) as f64;
        let origin = (center.0 as f64 - half * s, center.1 as f64 - half * s);
        let mut image = vec![0f32; 3 * p * p];
        let mut mask = vec![0u8; p * p];
        let (w, h) = (self.raster.width as i64, self.raster.height as i64);
        if s == 1.0 {
            let (ox, oy) = (origin.0 as i64, origin.1 as i64);
            for j in 0..p {
                for i in 0..p {
                    let (x, y) = (ox + i as i64, oy + j as i64);
                    let px = self.raster.pixel_or_background(x, y);
                    for c in 0..3 {
                        image[c * p * p + j * p + i] = px[c] as f32 / 255.0;
                    }
                    if x >= 0 && y >= 0 && x < w && y < h {
                        mask[j * p + i] = self.annotation.get(x as usize, y as usize) as u8;
                    }
                }
            }
        } else {
            for j in 0..p {
                let v = origin.1 + j as f64 * s;
                for i in 0..p {
                    let u = origin.0 + i as f64 * s;
                    let px = bilinear(&self.raster, u, v);
                    for c in 0..3 {
                        image[c * p * p + j * p + i] = px[c] / 255.0;
                    }
                    let (x, y) = (u.round() as i64, v.round() as i64);
                    if x >= 0 && y >= 0 && x < w && y < h {
                        mask[j * p + i] = self.annotation.get(x as usize, y as usize) as u8;
                    }
                }
            }
        }
        (image, mask, origin)
    }
}

pub(crate) fn bilinear(r: &RgbRaster, u: f64, v: f64) -> [f32; 3] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = (u - x0) as f32;
    let fy = (v - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let p00 = r.pixel_or_background(x0, y0);
    let p10 = r.pixel_or_background(x0 + 1, y0);
    let p01 = r.pixel_or_background(x0, y0 + 1);
    let p11 = r.pixel_or_background(x0 + 1, y0 + 1);
    let mut out = [0f32; 3];
    for c in 0..3 {
        let a = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
        let b = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
        out[c] = a * (1.0 - fy) + b * fy;
    }
    out
}

/// Draws one patch from `sources` (see module docs), then augments it.
pub fn sample_patch_from(
    sources: &[SamplingSource],
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    let first = if rng.random_bool(config.class_balance) {
        SampledClass::Cancer
    } else {
        SampledClass::Normal
    };
    let other = match first {
        SampledClass::Cancer => SampledClass::Normal,
        SampledClass::Normal => SampledClass::Cancer,
    };
    // An unreachable class is redrawn; with two classes that is the other one.
    let class = if sources.iter().any(|s| s.has_class(first)) {
        first
    } else if sources.iter().any(|s| s.has_class(other)) {
        other
    } else {
        let ids: Vec<&str> = sources.iter().map(|s| s.slide_id.as_str()).collect();
        return Err(Error::EmptyTissue(format!(
            "no tissue pixels to sample in [{}]",
            ids.join(", ")
        )));
    };
    let eligible: Vec<&SamplingSource> = sources.iter().filter(|s| s.has_class(class)).collect();
    let src = eligible[rng.random_range(0..eligible.len())];
    let cands = src.candidates(class);
    let idx = cands[rng.random_range(0..cands.len())] as usize;
    let center = (idx % src.raster.width, idx / src.raster.width);
    let p = config.patch_px;
    let (image, mask, origin) = src.extract(center, p);
    let label = config.label_criterion.assign(&mask);
    let sample = PatchSample {
        patch_px: p,
        image,
        mask,
        label,
        criterion: config.label_criterion,
        source: PatchSource {
            slide_id: src.slide_id.clone(),
            level: src.level,
            origin,
            rescale: src.rescale,
            center,
        },
        sampled_class: class,
    };
    Ok(augment(&sample, &config.augmentations, rng))
}

/// Single-slide form of [`sample_patch_from`].
pub fn sample_patch(
    source: &SamplingSource,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    sample_patch_from(std::slice::from_ref(source), config, rng)
}

/// Deterministic multi-stream sampler. Batch item `i` comes from stream
/// `i % workers`; streams run in parallel and results merge by index.
pub struct PatchSampler {
    sources: Arc<Vec<SamplingSource>>,
    config: SamplerConfig,
    streams: Vec<ChaCha8Rng>,
}

impl PatchSampler {
    pub fn new(sources: Vec<SamplingSource>, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::EmptyTissue("sampler has no slides".into()));
        }
        let streams = (0..config.workers)
            .map(|w| ChaCha8Rng::seed_from_u64(config.seed ^ w as u64))
            .collect();
        Ok(Self {
            sources: Arc::new(sources),
            config,
            streams,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sources(&self) -> &[SamplingSource] {
        &self.sources
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<PatchSample>> {
        let workers = self.streams.len();
        let sources = &self.sources;
        let config = &self.config;
        let per_worker: Vec<Vec<PatchSample>> = self
            .streams
            .par_iter_mut()
            .enumerate()
            .map(|(w, rng)| {
                (w..n)
                    .step_by(workers)
                    .map(|_| sample_patch_from(sources, config, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut iters: Vec<_> = per_worker.into_iter().map(|v| v.into_iter()).collect();
        Ok((0..n)
            .map(|i| {
                iters[i % workers]
                    .next()
                    .expect("stream produced its share")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(w: usize, h: usize, ann: impl Fn(usize, usize) -> bool) -> SamplingSource {
        let mut raster = RgbRaster::filled(w, h, [255, 255, 255]);
        let mut tissue = BinaryMask::zeros(0, w, h, MaskRole::Tissue);
        let mut annotation = BinaryMask::zeros(0, w, h, MaskRole::Annotation);
        for y in 0..h {
            for x in 0..w {
                raster.set_pixel(x, y, [(x * 3 % 256) as u8, (y * 5 % 256) as u8, 100]);
                tissue.set(x, y, true);
                annotation.set(x, y, ann(x, y));
            }
        }
        SamplingSource::from_parts("s", 0, 1.0, raster, tissue, annotation).unwrap()
    }

    fn plain(p: usize) -> SamplerConfig {
        SamplerConfig {
            patch_px: p,
            augmentations: AugmentationConfig::disabled(),
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn extraction_at_unit_scale_copies_pixels() {
        let src = source(100, 80, |x, _| x >= 50);
        let (img, mask, origin) = src.extract((40, 30), 32);
        assert_eq!(origin, (24.0, 14.0));
        // patch pixel (16,16) is the centre
        let px = src.raster.pixel(40, 30);
        assert_eq!(img[16 * 32 + 16], px[0] as f32 / 255.0);
        assert_eq!(mask[16 * 32 + 26], 1);
        assert_eq!(mask[16 * 32 + 25], 0);
    }

    #[test]
    fn config_validation() {
        let mut c = plain(250);
        assert!(c.validate().is_err());
        c.patch_px = 64;
        assert!(c.validate().is_ok());
        c.class_balance = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_tissue_is_an_error() {
        let w = 8;
        let src = SamplingSource::from_parts(
            "empty",
            0,
            1.0,
            RgbRaster::filled(w, w, [255, 255, 255]),
            BinaryMask::zeros(0, w, w, MaskRole::Tissue),
            BinaryMask::zeros(0, w, w, MaskRole::Annotation),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_patch(&src, &plain(32), &mut rng).unwrap_err();
        assert!(matches!(e, Error::EmptyTissue(_)));
    }

    #[test]
    fn rescaled_extraction_stays_binary_and_in_range() {
        let mut src = source(120, 120, |x, y| x + y > 120);
        src.rescale = 1.2853;
        let (img, mask, _) = src.extract((60, 60), 32);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(mask.iter().all(|&m| m <= 1));
        assert!(mask.contains(&1) && mask.contains(&0));
    }

    #[test]
    fn multi_worker_batches_are_reproducible() {
        let src = source(64, 64, |x, _| x < 32);
        let cfg = SamplerConfig {
            workers: 3,
            seed: 99,
            ..plain(32)
        };
        let mut a = PatchSampler::new(vec![src.clone()], cfg.clone()).unwrap();
        let mut b = PatchSampler::new(vec![src], cfg).unwrap();
        for _ in 0..3 {
            assert_eq!(a.next_batch(7).unwrap(), b.next_batch(7).unwrap());
        }
    }
}
