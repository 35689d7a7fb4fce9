//! Image augmentation at three strengths.
//!
//! * `None`: deterministic center crop (87.5% of the side) resized back.
//! * `Low`: random resized crop (area in [0.6, 1.0], aspect in [3/4, 4/3])
//!   and a horizontal flip with probability 0.5.
//! * `High`: `Low` plus brightness/contrast/saturation jitter with factors
//!   in [0.7, 1.3] and grayscale with probability 0.2.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CENTER_CROP_FRACTION: f64 = 0.875;
pub const CROP_AREA: (f64, f64) = (0.6, 1.0);
pub const CROP_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const FLIP_P: f64 = 0.5;
pub const JITTER: (f64, f64) = (0.7, 1.3);
pub const GRAYSCALE_P: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AugmentLevel {
    #[default]
    None,
    Low,
    High,
}

impl fmt::Display for AugmentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentLevel::None => "none",
            AugmentLevel::Low => "low",
            AugmentLevel::High => "high",
        })
    }
}

impl FromStr for AugmentLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AugmentLevel::None),
            "low" => Ok(AugmentLevel::Low),
            "high" => Ok(AugmentLevel::High),
            other => Err(Error::config(format!("unknown augmentation level '{other}' (none|low|high)"))),
        }
    }
}

/// Bilinear resample of the source window `(x0, y0, w, h)` (in source
/// pixels) of a `[3 x H x W]` image onto an `out_h x out_w` grid.
pub fn resample(image: &Tensor, window: (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Tensor {
    let (sh, sw) = (image.shape()[1], image.shape()[2]);
    let (x0, y0, w, h) = window;
    let src = image.data();
    let mut out = vec![0.0; 3 * out_h * out_w];
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    for oy in 0..out_h {
        let sy = clamp(y0 + (oy as f64 + 0.5) * h / out_h as f64 - 0.5, sh);
        let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
        let y_hi = (y_lo + 1).min(sh - 1);
        for ox in 0..out_w {
            let sx = clamp(x0 + (ox as f64 + 0.5) * w / out_w as f64 - 0.5, sw);
            let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
            let x_hi = (x_lo + 1).min(sw - 1);
            for c in 0..3 {
                let p = |y: usize, x: usize| src[c * sh * sw + y * sw + x];
                let top = p(y_lo, x_lo) * (1.0 - fx) + p(y_lo, x_hi) * fx;
                let bottom = p(y_hi, x_lo) * (1.0 - fx) + p(y_hi, x_hi) * fx;
                out[c * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![3, out_h, out_w], out).expect("resample shape")
}

/// Whole-image bilinear resize to a square `size`.
pub fn resize(image: &Tensor, size: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h == size && w == size {
        return image.clone();
    }
    resample(image, (0.0, 0.0, w as f64, h as f64), size, size)
}

/// `0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn center_crop(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (cw, ch) = (w as f64 * CENTER_CROP_FRACTION, h as f64 * CENTER_CROP_FRACTION);
    resample(image, ((w as f64 - cw) / 2.0, (h as f64 - ch) / 2.0, cw, ch), h, w)
}

fn random_resized_crop(image: &Tensor, rng: &mut Rng) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (CROP_ASPECT.0.ln(), CROP_ASPECT.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(CROP_AREA.0..=CROP_AREA.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt();
        let ch = (target / aspect).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            return resample(image, (x0, y0, cw, ch), h, w);
        }
    }
    image.clone()
}

fn flip_horizontal(image: &mut Tensor) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for row in image.data_mut().chunks_mut(w).take(3 * h) {
        row.reverse();
    }
}

fn clamp_unit(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn gray_plane(data: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| luminance(data[i], data[n + i], data[2 * n + i])).collect()
}

pub fn adjust_brightness(image: &mut Tensor, factor: f64) {
    let d = image.data_mut();
    d.iter_mut().for_each(|v| *v *= factor);
    clamp_unit(d);
}

pub fn adjust_contrast(image: &mut Tensor, factor: f64) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    let mean = gray_plane(d, n).iter().sum::<f64>() / n as f64;
    d.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
    clamp_unit(d);
}

pub fn adjust_saturation(image: &mut Tensor, factor: f64) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    let gray = gray_plane(d, n);
    for c in 0..3 {
        for i in 0..n {
            let v = &mut d[c * n + i];
            *v = (*v - gray[i]) * factor + gray[i];
        }
    }
    clamp_unit(d);
}

pub fn to_grayscale(image: &mut Tensor) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    let gray = gray_plane(d, n);
    for c in 0..3 {
        d[c * n..(c + 1) * n].copy_from_slice(&gray);
    }
}

/// Deterministic evaluation preprocessing; same as `augment` at `None`.
pub fn preprocess(image: &LabeledImage) -> LabeledImage {
    LabeledImage {
        pixels: center_crop(&image.pixels),
        class_id: image.class_id,
        source_id: image.source_id.clone(),
    }
}

/// Augments the pixels of `image`; label and source id are kept.
pub fn augment(image: &LabeledImage, level: AugmentLevel, rng: &mut Rng) -> LabeledImage {
    let mut px = match level {
        AugmentLevel::None => center_crop(&image.pixels),
        AugmentLevel::Low | AugmentLevel::High => {
            let mut t = random_resized_crop(&image.pixels, rng);
            if rng.random::<f64>() < FLIP_P {
                flip_horizontal(&mut t);
            }
            t
        }
    };
    if level == AugmentLevel::High {
        adjust_brightness(&mut px, rng.random_range(JITTER.0..=JITTER.1));
        adjust_contrast(&mut px, rng.random_range(JITTER.0..=JITTER.1));
        adjust_saturation(&mut px, rng.random_range(JITTER.0..=JITTER.1));
        if rng.random::<f64>() < GRAYSCALE_P {
            to_grayscale(&mut px);
        }
    }
    clamp_unit(px.data_mut());
    LabeledImage {
        pixels: px,
        class_id: image.class_id,
        source_id: image.source_id.clone(),
    }
}
