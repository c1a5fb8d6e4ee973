//! Synthetic pyramid slides with exactly known tissue and tumour geometry.
//!
//! Tissue is a union of smooth random blobs rendered in an H&E-like pink
//! with sparse nuclei; tumour blobs are clipped to tissue and rendered in
//! purple with dense nuclei, so the classes differ both in hue and in
//! spatial frequency. Level 0 is rendered directly; coarser levels are
//! exact 2× mean-pool downsamples, and the declared masks follow the same
//! pyramid with the area-threshold rule.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::slide_store::{
    build_levels, ingest_annotation, open_slide, write_slide, BinaryMask, MaskRole, RgbRaster,
    SlideLabel, SlidePyramid, TissueDetector, BACKGROUND, DEFAULT_TILE_SIZE,
};

pub const INDEX_FILE: &str = "index.json";
const PLACEMENT_ATTEMPTS: usize = 200;

/// A closed blob: a disk whose radius is modulated by a few harmonics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// (relative amplitude, phase) for harmonics 2, 3, ...
    #[serde(default)]
    pub harmonics: Vec<(f64, f64)>,
}

impl Blob {
    pub fn disk(cx: f64, cy: f64, radius: f64) -> Self {
        Self {
            cx,
            cy,
            radius,
            harmonics: Vec::new(),
        }
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let d2 = dx * dx + dy * dy;
        let rmax = self.radius * (1.0 + self.harmonics.iter().map(|h| h.0.abs()).sum::<f64>());
        if d2 > rmax * rmax {
            return false;
        }
        let r = if self.harmonics.is_empty() {
            self.radius
        } else {
            let theta = dy.atan2(dx);
            let m: f64 = self
                .harmonics
                .iter()
                .enumerate()
                .map(|(i, (a, p))| a * ((i as f64 + 2.0) * theta + p).sin())
                .sum();
            self.radius * (1.0 + m)
        };
        d2 < r * r
    }

    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64, irregularity: f64) -> Self {
        let harmonics = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.0..=irregularity.max(0.0)) / 2.0,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self {
            cx,
            cy,
            radius,
            harmonics,
        }
    }
}

/// Blob layout: either drawn at random or given explicitly (level-0 pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobSet {
    Random {
        count: (usize, usize),
        /// Radius range as a fraction of the shorter base side.
        radius_frac: (f64, f64),
    },
    Fixed(Vec<Blob>),
}

impl BlobSet {
    fn is_empty(&self) -> bool {
        match self {
            BlobSet::Random { count, .. } => count.1 == 0,
            BlobSet::Fixed(b) => b.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub tissue_rgb: [f64; 3],
    pub tumour_rgb: [f64; 3],
    pub nucleus_rgb: [f64; 3],
    /// Amplitude of low-frequency colour modulation.
    pub jitter: f64,
    /// Fraction of nucleus grid cells occupied in normal tissue / tumour.
    pub normal_nuclei: f64,
    pub tumour_nuclei: f64,
    /// Nucleus grid spacing in level-0 pixels (normal / tumour).
    pub normal_cell_px: f64,
    pub tumour_cell_px: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            tissue_rgb: [236.0, 156.0, 200.0],
            tumour_rgb: [150.0, 88.0, 182.0],
            nucleus_rgb: [92.0, 46.0, 128.0],
            jitter: 12.0,
            normal_nuclei: 0.10,
            tumour_nuclei: 0.55,
            normal_cell_px: 16.0,
            tumour_cell_px: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub slide_id: String,
    pub patient_id: String,
    /// Level-0 size (width, height).
    pub base_px: (usize, usize),
    pub base_um: f64,
    pub n_levels: usize,
    pub tile_size: usize,
    pub tissue: BlobSet,
    pub tumour: BlobSet,
    /// Harmonic amplitude bound for random blobs.
    pub irregularity: f64,
    pub texture: Texture,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            slide_id: "synth_000".into(),
            patient_id: "patient_000".into(),
            base_px: (4096, 4096),
            base_um: 3.89,
            n_levels: 3,
            tile_size: DEFAULT_TILE_SIZE,
            tissue: BlobSet::Random {
                count: (2, 3),
                radius_frac: (0.22, 0.30),
            },
            tumour: BlobSet::Random {
                count: (1, 2),
                radius_frac: (0.10, 0.17),
            },
            irregularity: 0.25,
            texture: Texture::default(),
        }
    }
}

/// Level-0 rendering plus its declared masks.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub base: RgbRaster,
    pub tissue: BinaryMask,
    pub annotation: BinaryMask,
}

/// A generated slide on disk together with its declared level-0 masks.
#[derive(Debug, Clone)]
pub struct GeneratedSlide {
    pub slide: SlidePyramid,
    pub annotation: BinaryMask,
    pub tissue: BinaryMask,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    mix64(seed ^ mix64(x as u64 ^ mix64(y as u64)))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [-1, 1] with lattice spacing `scale`.
fn value_noise(seed: u64, x: f64, y: f64, scale: f64) -> f64 {
    let fx = x / scale;
    let fy = y / scale;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v = |dx: i64, dy: i64| unit(hash2(seed, ix + dx, iy + dy)) * 2.0 - 1.0;
    let a = v(0, 0) + (v(1, 0) - v(0, 0)) * sx;
    let b = v(0, 1) + (v(1, 1) - v(0, 1)) * sx;
    a + (b - a) * sy
}

/// Darkening weight in [0, 1] of a nucleus field on a jittered grid.
fn nuclei(seed: u64, x: f64, y: f64, cell: f64, density: f64) -> f64 {
    let gx = (x / cell).floor() as i64;
    let gy = (y / cell).floor() as i64;
    let mut best: f64 = 0.0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let h = hash2(seed ^ 0x5EED, gx + dx, gy + dy);
            if unit(h) >= density {
                continue;
            }
            let h2 = mix64(h);
            let cx = (gx + dx) as f64 * cell + cell * (0.25 + 0.5 * unit(h2));
            let cy = (gy + dy) as f64 * cell + cell * (0.25 + 0.5 * unit(mix64(h2)));
            let r = cell * 0.3;
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            best = best.max((1.0 - d / r).clamp(0.0, 1.0));
        }
    }
    best.min(1.0).powf(0.5)
}

fn realize(
    set: &BlobSet,
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    irregularity: f64,
) -> Vec<(f64, Blob)> {
    match set {
        BlobSet::Fixed(b) => b.iter().map(|b| (b.radius, b.clone())).collect(),
        BlobSet::Random { count, radius_frac } => {
            let n = if count.0 >= count.1 {
                count.0
            } else {
                rng.random_range(count.0..=count.1)
            };
            let side = w.min(h) as f64;
            (0..n)
                .map(|_| {
                    let r = if radius_frac.0 >= radius_frac.1 {
                        radius_frac.0 * side
                    } else {
                        rng.random_range(radius_frac.0..radius_frac.1) * side
                    };
                    (r, Blob::random(rng, 0.0, 0.0, r, irregularity))
                })
                .collect()
        }
    }
}

/// Renders level 0 and the declared masks. Pure in `spec`.
pub fn render(spec: &SynthSpec) -> Result<Rendered> {
    let (w, h) = spec.base_px;
    if w == 0 || h == 0 || spec.n_levels == 0 {
        return Err(Error::InvalidConfig(
            "base_px and n_levels must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let random_tissue = matches!(spec.tissue, BlobSet::Random { .. });
    let mut tissue_blobs: Vec<Blob> = realize(&spec.tissue, &mut rng, w, h, spec.irregularity)
        .into_iter()
        .map(|(r, mut b)| {
            if random_tissue {
                let mx = (r * 1.05).min(w as f64 / 2.0);
                let my = (r * 1.05).min(h as f64 / 2.0);
                b.cx = rng.random_range(mx..=(w as f64 - mx));
                b.cy = rng.random_range(my..=(h as f64 - my));
            }
            b
        })
        .collect();
    if tissue_blobs.is_empty() {
        tissue_blobs.push(Blob::disk(w as f64 / 2.0, h as f64 / 2.0, 0.0));
    }

    let mut tissue = BinaryMask::zeros(0, w, h, MaskRole::Tissue);
    fill(&mut tissue, &tissue_blobs);

    let mut annotation = BinaryMask::zeros(0, w, h, MaskRole::Annotation);
    let random_tumour = matches!(spec.tumour, BlobSet::Random { .. });
    for (r, mut blob) in realize(&spec.tumour, &mut rng, w, h, spec.irregularity) {
        if random_tumour {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                blob.cx = cx;
                blob.cy = cy;
                if inside_fraction(&blob, &tissue) >= 0.9 {
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Placement(format!(
                    "slide {}: no tissue region fits a tumour of radius {r:.1}px after {PLACEMENT_ATTEMPTS} attempts",
                    spec.slide_id
                )));
            }
        }
        fill(&mut annotation, std::slice::from_ref(&blob));
    }
    // Tumour regions are tissue by definition.
    let annotation = crate::slide_store::apply_tissue_mask(&annotation, &tissue)?;

    let base = paint(spec, &tissue, &annotation);
    Ok(Rendered {
        base,
        tissue,
        annotation,
    })
}

fn fill(mask: &mut BinaryMask, blobs: &[Blob]) {
    let (w, h) = (mask.width, mask.height);
    for b in blobs {
        let rmax = b.radius * (1.0 + b.harmonics.iter().map(|h| h.0.abs()).sum::<f64>()) + 1.0;
        let x0 = (b.cx - rmax).floor().max(0.0) as usize;
        let x1 = ((b.cx + rmax).ceil().max(0.0) as usize).min(w);
        let y0 = (b.cy - rmax).floor().max(0.0) as usize;
        let y1 = ((b.cy + rmax).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask.set(x, y, true);
                }
            }
        }
    }
}

fn inside_fraction(blob: &Blob, tissue: &BinaryMask) -> f64 {
    let step = (blob.radius / 12.0).max(1.0);
    let (mut inside, mut total) = (0usize, 0usize);
    let r = blob.radius * 1.6;
    let mut y = blob.cy - r;
    while y <= blob.cy + r {
        let mut x = blob.cx - r;
        while x <= blob.cx + r {
            if blob.contains(x, y) {
                total += 1;
                if x >= 0.0
                    && y >= 0.0
                    && (x as usize) < tissue.width
                    && (y as usize) < tissue.height
                    && tissue.get(x as usize, y as usize)
                {
                    inside += 1;
                }
            }
            x += step;
        }
        y += step;
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

fn paint(spec: &SynthSpec, tissue: &BinaryMask, annotation: &BinaryMask) -> RgbRaster {
    let (w, h) = (tissue.width, tissue.height);
    let t = &spec.texture;
    let seed = mix64(spec.seed ^ 0xC0FF_EE00);
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * 3);
            for x in 0..w {
                if !tissue.get(x, y) {
                    row.extend_from_slice(&BACKGROUND);
                    continue;
                }
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let tumour = annotation.get(x, y);
                let (base, cell, density) = if tumour {
                    (t.tumour_rgb, t.tumour_cell_px, t.tumour_nuclei)
                } else {
                    (t.tissue_rgb, t.normal_cell_px, t.normal_nuclei)
                };
                let low = value_noise(seed, fx, fy, 96.0);
                let fine = value_noise(seed ^ 1, fx, fy, 6.0);
                let n = nuclei(seed, fx, fy, cell, density);
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = base[c] + t.jitter * (0.8 * low + 0.2 * fine);
                    let v = v * (1.0 - 0.75 * n) + t.nucleus_rgb[c] * 0.75 * n;
                    px[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                row.extend_from_slice(&px);
            }
            row
        })
        .collect();
    RgbRaster {
        width: w,
        height: h,
        data: rows.concat(),
    }
}

/// Renders `spec`, writes the slide directory (tiles, manifest, declared masks
/// under `truth/`, ingested masks under `masks/`) and returns it.
pub fn generate_slide(spec: &SynthSpec, dir: &Path) -> Result<GeneratedSlide> {
    let rendered = render(spec)?;
    let label = if rendered.annotation.is_empty() || spec.tumour.is_empty() {
        SlideLabel::Negative
    } else {
        SlideLabel::Positive
    };
    let levels = build_levels(rendered.base, spec.n_levels);
    let slide = write_slide(
        dir,
        &spec.slide_id,
        &spec.patient_id,
        label,
        &levels,
        spec.base_um,
        spec.tile_size,
    )?;
    let mut tissue = rendered.tissue.clone();
    let mut annotation = rendered.annotation.clone();
    for level in 0..spec.n_levels {
        if level > 0 {
            tissue = tissue.downsample_2x();
            annotation = annotation.downsample_2x();
        }
        tissue.save_png(&truth_path(dir, MaskRole::Tissue, level))?;
        annotation.save_png(&truth_path(dir, MaskRole::Annotation, level))?;
    }
    ingest_annotation(&slide, &rendered.annotation, &TissueDetector::default())?;
    Ok(GeneratedSlide {
        slide,
        annotation: rendered.annotation,
        tissue: rendered.tissue,
    })
}

/// Declared (generator ground truth) mask location.
pub fn truth_path(slide_dir: &Path, role: MaskRole, level: usize) -> PathBuf {
    slide_dir
        .join("truth")
        .join(format!("{role}_level_{level}.png"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_patients: usize,
    pub slides_per_patient: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    /// Per-slide template; seed, ids and the tumour set are overridden.
    pub template: SynthSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_patients: 29,
            slides_per_patient: 2,
            positive_fraction: 51.0 / 58.0,
            seed: 0,
            template: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: SlideLabel,
    /// Manifest path relative to the dataset directory.
    pub manifest: String,
}

/// `index.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub slides: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(dataset_dir: &Path) -> Result<Self> {
        fsio::read_json(&dataset_dir.join(INDEX_FILE))
    }

    pub fn open_all(&self, dataset_dir: &Path) -> Result<Vec<SlidePyramid>> {
        self.slides
            .iter()
            .map(|e| open_slide(&dataset_dir.join(&e.manifest)))
            .collect()
    }
}

/// Number of positive slides for a dataset shape.
pub fn positive_count(total: usize, positive_fraction: f64) -> usize {
    ((positive_fraction * total as f64).round() as usize).min(total)
}

/// Generates `n_patients × slides_per_patient` slides under
/// `<out>/slides/<slide_id>/` and writes `<out>/index.json`. The negative
/// slides are the trailing ones, so negatives cluster by patient.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetIndex> {
    if !(0.0..=1.0).contains(&spec.positive_fraction) {
        return Err(Error::InvalidConfig(format!(
            "positive_fraction {} outside [0, 1]",
            spec.positive_fraction
        )));
    }
    if spec.n_patients < 5 {
        return Err(Error::InvalidConfig(format!(
            "need at least 5 patients, got {}",
            spec.n_patients
        )));
    }
    if spec.slides_per_patient == 0 {
        return Err(Error::InvalidConfig(
            "slides_per_patient must be ≥ 1".into(),
        ));
    }
    let total = spec.n_patients * spec.slides_per_patient;
    let n_pos = positive_count(total, spec.positive_fraction);
    let entries: Vec<(usize, SynthSpec)> = (0..total)
        .map(|i| {
            let mut s = spec.template.clone();
            s.seed = mix64(spec.seed ^ mix64(i as u64 + 1));
            s.slide_id = format!("slide_{i:03}");
            s.patient_id = format!("patient_{:03}", i / spec.slides_per_patient);
            if i >= n_pos {
                s.tumour = BlobSet::Fixed(Vec::new());
            }
            (i, s)
        })
        .collect();
    let slides_dir = out_dir.join("slides");
    let generated: Vec<IndexEntry> = entries
        .par_iter()
        .map(|(_, s)| {
            let dir = slides_dir.join(&s.slide_id);
            let g = generate_slide(s, &dir)?;
            Ok(IndexEntry {
                slide_id: s.slide_id.clone(),
                patient_id: s.patient_id.clone(),
                label: g.slide.label,
                manifest: format!("slides/{}/slide.json", s.slide_id),
            })
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        seed: spec.seed,
        slides: generated,
    };
    fsio::write_json(&out_dir.join(INDEX_FILE), &index)?;
    Ok(index)
}
