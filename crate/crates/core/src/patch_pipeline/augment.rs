use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchSample;

/// Augmentation magnitudes and per-transform probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip_h: bool,
    pub flip_v: bool,
    pub flip_prob: f64,
    pub blur_prob: f64,
    /// Gaussian sigma is drawn from `[0, blur_sigma_max]` pixels.
    pub blur_sigma_max: f64,
    pub hsv_prob: f64,
    pub hue_shift: f64,
    pub sat_shift: f64,
    pub val_shift: f64,
    pub contrast_prob: f64,
    pub contrast: (f64, f64),
    pub brightness_prob: f64,
    pub brightness: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_h: true,
            flip_v: true,
            flip_prob: 0.5,
            blur_prob: 0.25,
            blur_sigma_max: 1.0,
            hsv_prob: 1.0,
            hue_shift: 0.04,
            sat_shift: 0.1,
            val_shift: 0.1,
            contrast_prob: 1.0,
            contrast: (0.85, 1.15),
            brightness_prob: 1.0,
            brightness: (-0.1, 0.1),
        }
    }
}

impl AugmentationConfig {
    /// Every transform off; `augment` is then the identity.
    pub fn disabled() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            flip_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            hsv_prob: 0.0,
            hue_shift: 0.0,
            sat_shift: 0.0,
            val_shift: 0.0,
            contrast_prob: 0.0,
            contrast: (1.0, 1.0),
            brightness_prob: 0.0,
            brightness: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
            ("hsv_prob", self.hsv_prob),
            ("contrast_prob", self.contrast_prob),
            ("brightness_prob", self.brightness_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        let finite = [
            self.blur_sigma_max,
            self.hue_shift,
            self.sat_shift,
            self.val_shift,
            self.contrast.0,
            self.contrast.1,
            self.brightness.0,
            self.brightness.1,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err("augmentation ranges must be finite".into());
        }
        if self.contrast.0 > self.contrast.1 || self.brightness.0 > self.brightness.1 {
            return Err("augmentation ranges must be ordered (lo, hi)".into());
        }
        if self.blur_sigma_max < 0.0 {
            return Err("blur_sigma_max must be ≥ 0".into());
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    draw(rng, (-max.abs(), max.abs()))
}

/// Applies the configured transforms. Flips move image and mask together;
/// photometric transforms touch the image only. The label is recomputed by
/// the caller's criterion from the transformed mask.
pub fn augment(
    sample: &PatchSample,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> PatchSample {
    let mut out = sample.clone();
    let p = out.patch_px;
    if config.flip_h && config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
        flip_horizontal(&mut out.image, &mut out.mask, p);
    }
    if config.flip_v && config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
        flip_vertical(&mut out.image, &mut out.mask, p);
    }
    if config.blur_prob > 0.0 && rng.random_bool(config.blur_prob) {
        let sigma = draw(rng, (0.0, config.blur_sigma_max));
        gaussian_blur(&mut out.image, p, sigma);
    }
    if config.hsv_prob > 0.0 && rng.random_bool(config.hsv_prob) {
        let dh = symmetric(rng, config.hue_shift);
        let ds = symmetric(rng, config.sat_shift);
        let dv = symmetric(rng, config.val_shift);
        shift_hsv(&mut out.image, dh, ds, dv);
    }
    let c = if config.contrast_prob > 0.0 && rng.random_bool(config.contrast_prob) {
        draw(rng, config.contrast)
    } else {
        1.0
    };
    let b = if config.brightness_prob > 0.0 && rng.random_bool(config.brightness_prob) {
        draw(rng, config.brightness)
    } else {
        0.0
    };
    if c != 1.0 || b != 0.0 {
        contrast_brightness(&mut out.image, c, b);
    }
    out.label = out.criterion.assign(&out.mask);
    out
}

/// Column `x` moves to `p - 1 - x` in every channel and in the mask.
pub fn flip_horizontal(image: &mut [f32], mask: &mut [u8], p: usize) {
    for plane in image.chunks_exact_mut(p * p) {
        for row in plane.chunks_exact_mut(p) {
            row.reverse();
        }
    }
    for row in mask.chunks_exact_mut(p) {
        row.reverse();
    }
}

/// Row `y` moves to `p - 1 - y`.
pub fn flip_vertical(image: &mut [f32], mask: &mut [u8], p: usize) {
    fn flip_rows<T: Copy>(plane: &mut [T], p: usize) {
        for y in 0..p / 2 {
            let (top, bottom) = plane.split_at_mut((p - 1 - y) * p);
            top[y * p..(y + 1) * p].swap_with_slice(&mut bottom[..p]);
        }
    }
    for plane in image.chunks_exact_mut(p * p) {
        flip_rows(plane, p);
    }
    flip_rows(mask, p);
}

/// Separable Gaussian blur with reflected borders, per channel.
pub fn gaussian_blur(image: &mut [f32], p: usize, sigma: f64) {
    if sigma <= 1e-3 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let reflect = |i: isize| -> usize {
        let n = p as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0f32; p * p];
    for plane in image.chunks_exact_mut(p * p) {
        for y in 0..p {
            for x in 0..p {
                let mut acc = 0f32;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * plane[y * p + reflect(x as isize + k as isize - radius)];
                }
                tmp[y * p + x] = acc;
            }
        }
        for y in 0..p {
            for x in 0..p {
                let mut acc = 0f32;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * tmp[reflect(y as isize + k as isize - radius) * p + x];
                }
                plane[y * p + x] = acc;
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max > 0.0 { d / max } else { 0.0 };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Adds `dh` to hue (wrapping) and `ds`, `dv` to saturation and value
/// (clamped), on a CHW image.
pub fn shift_hsv(image: &mut [f32], dh: f64, ds: f64, dv: f64) {
    let n = image.len() / 3;
    let (rp, rest) = image.split_at_mut(n);
    let (gp, bp) = rest.split_at_mut(n);
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(rp[i], gp[i], bp[i]);
        let (r, g, b) = hsv_to_rgb(
            h + dh as f32,
            (s + ds as f32).clamp(0.0, 1.0),
            (v + dv as f32).clamp(0.0, 1.0),
        );
        rp[i] = r;
        gp[i] = g;
        bp[i] = b;
    }
}

/// `x ← clamp(x·contrast + brightness, 0, 1)`.
pub fn contrast_brightness(image: &mut [f32], contrast: f64, brightness: f64) {
    let (c, b) = (contrast as f32, brightness as f32);
    for v in image.iter_mut() {
        *v = (*v * c + b).clamp(0.0, 1.0);
    }
}
