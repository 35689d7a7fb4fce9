//! Procedural dataset: each class is a hue plus a geometric pattern
//! (stripes, checks or disks) whose parameters depend on the class index.
//! Images jitter the pattern's position, scale and hue and add pixel noise.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree, Stream};
use crate::tensor::Tensor;

/// Generator settings. Jitters are half-widths of uniform draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub hue_jitter: f64,
    pub scale_jitter: f64,
    pub pixel_noise: f64,
    /// Per-image background hue shift, independent of the class.
    pub background_jitter: f64,
    /// Per-image multiplicative brightness change.
    pub brightness_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            // 25 train images per class: a 20-deep pool plus held-out spares
            per_class: 50,
            image_size: 32,
            seed: 0,
            hue_jitter: 0.04,
            scale_jitter: 0.2,
            pixel_noise: 0.08,
            background_jitter: 0.0,
            brightness_jitter: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Stripes { angle: f64 },
    Checks,
    Disks,
}

#[derive(Clone, Copy, Debug)]
struct ClassTemplate {
    hue: f64,
    pattern: Pattern,
    /// Pattern period in units of the image side.
    period: f64,
}

fn template(c: usize, num_classes: usize) -> ClassTemplate {
    // golden-ratio hue spacing keeps neighbouring ids apart
    let hue = (c as f64 * 0.618_033_988_75).fract();
    let variant = c / 3;
    let pattern = match c % 3 {
        0 => Pattern::Stripes {
            angle: (variant as f64 * 0.61).rem_euclid(PI),
        },
        1 => Pattern::Checks,
        _ => Pattern::Disks,
    };
    let levels = num_classes.div_ceil(3).max(1) as f64;
    let period = 0.22 + 0.3 * (variant as f64 / levels);
    ClassTemplate { hue, pattern, period }
}

/// HSV to RGB with all components in `[0, 1]`.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pattern intensity in `[0, 1]` at normalized coordinates `(u, v)`.
fn pattern_value(pattern: Pattern, u: f64, v: f64, period: f64) -> f64 {
    match pattern {
        Pattern::Stripes { angle } => {
            let t = (u * angle.cos() + v * angle.sin()) / period;
            0.5 + 0.5 * (2.0 * PI * t).sin()
        }
        Pattern::Checks => {
            let a = (u / period).floor() as i64 + (v / period).floor() as i64;
            if a.rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        Pattern::Disks => {
            let du = (u / period).rem_euclid(1.0) - 0.5;
            let dv = (v / period).rem_euclid(1.0) - 0.5;
            if (du * du + dv * dv).sqrt() < 0.32 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn jitter(rng: &mut Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn render(t: &ClassTemplate, cfg: &SynthConfig, rng: &mut Rng) -> Tensor {
    let size = cfg.image_size;
    let hue = t.hue + jitter(rng, cfg.hue_jitter);
    let scale = 1.0 + jitter(rng, cfg.scale_jitter);
    let (ou, ov) = (rng.random::<f64>(), rng.random::<f64>());
    let bg_shift = jitter(rng, cfg.background_jitter);
    let gain = 1.0 + jitter(rng, cfg.brightness_jitter);
    let fg = hsv(hue, 0.8, 0.9).map(|a| a * gain);
    let bg = hsv(hue + 0.5 + bg_shift, 0.35, 0.35).map(|a| a * gain);
    let noise = Normal::new(0.0, cfg.pixel_noise).map_err(|_| ()).ok();
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64 + ou;
            let v = y as f64 / size as f64 + ov;
            let m = pattern_value(t.pattern, u, v, t.period * scale);
            for c in 0..3 {
                let px = bg[c] + m * (fg[c] - bg[c]) + noise.map_or(0.0, |n| n.sample(rng));
                data[c * n + y * size + x] = px.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("image shape")
}

/// `per_class` images for each of `num_classes` classes. The first half of
/// every class (rounded up) lands in `train`, the rest in `val`.
pub fn synth_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(&SynthConfig {
        num_classes,
        per_class,
        image_size,
        seed,
        ..SynthConfig::default()
    })
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Dataset> {
    let SynthConfig {
        num_classes,
        per_class,
        image_size,
        seed,
        ..
    } = *cfg;
    if num_classes < 2 {
        return Err(Error::config(format!("synthetic dataset needs at least 2 classes, got {num_classes}")));
    }
    if image_size == 0 {
        return Err(Error::config("image_size must be positive"));
    }
    let widths = [cfg.hue_jitter, cfg.scale_jitter, cfg.pixel_noise, cfg.background_jitter, cfg.brightness_jitter];
    if widths.iter().any(|w| !w.is_finite() || *w < 0.0) || cfg.scale_jitter >= 1.0 || cfg.brightness_jitter >= 1.0 {
        return Err(Error::config("synthetic jitter settings must be finite, non-negative and below 1 for scale and brightness"));
    }
    let root = SeedTree::new(seed);
    let mut ds = Dataset {
        class_names: (0..num_classes).map(|c| format!("class_{c:03}")).collect(),
        image_size,
        ..Dataset::default()
    };
    let n_train = per_class.div_ceil(2);
    for c in 0..num_classes {
        let t = template(c, num_classes);
        let mut rng = root.child(c as u64).rng(Stream::Data);
        for i in 0..per_class {
            let img = LabeledImage {
                pixels: render(&t, cfg, &mut rng),
                class_id: c,
                source_id: format!("synth/c{c}/i{i}"),
            };
            if i < n_train {
                ds.train.push(img);
            } else {
                ds.val.push(img);
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_means(ds: &Dataset) -> Vec<Vec<f64>> {
        let dim = ds.train[0].pixels.numel();
        let mut means = vec![vec![0.0; dim]; ds.num_classes()];
        let mut counts = vec![0usize; ds.num_classes()];
        for img in &ds.train {
            counts[img.class_id] += 1;
            for (m, p) in means[img.class_id].iter_mut().zip(img.pixels.data()) {
                *m += p;
            }
        }
        for (m, n) in means.iter_mut().zip(counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        means
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn sizes_and_determinism() {
        let ds = synth_dataset(10, 40, 16, 0).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 400);
        assert_eq!(ds.train.len(), 200);
        let again = synth_dataset(10, 40, 16, 0).unwrap();
        assert_eq!(ds.train[17], again.train[17]);
        assert!(ds.train.iter().all(|i| i.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_dataset(1, 4, 8, 0).is_err());
    }

    #[test]
    fn config_wrapper_and_validation() {
        let a = synth_dataset(3, 4, 8, 2).unwrap();
        let b = synth_dataset_with(&SynthConfig {
            num_classes: 3,
            per_class: 4,
            image_size: 8,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(a.train, b.train);
        for bad in [
            SynthConfig { pixel_noise: -0.1, ..SynthConfig::default() },
            SynthConfig { scale_jitter: 1.0, ..SynthConfig::default() },
            SynthConfig { brightness_jitter: f64::NAN, ..SynthConfig::default() },
        ] {
            assert!(matches!(synth_dataset_with(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn nuisance_jitter_changes_images_not_labels() {
        let base = SynthConfig { num_classes: 3, per_class: 2, image_size: 8, ..SynthConfig::default() };
        let noisy = SynthConfig { background_jitter: 0.5, brightness_jitter: 0.3, ..base.clone() };
        let (a, b) = (synth_dataset_with(&base).unwrap(), synth_dataset_with(&noisy).unwrap());
        assert_ne!(a.train[0].pixels, b.train[0].pixels);
        assert_eq!(a.train[0].class_id, b.train[0].class_id);
        assert!(b.train.iter().all(|i| i.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn same_class_images_differ() {
        let ds = synth_dataset(3, 4, 16, 1).unwrap();
        assert_eq!(ds.train[0].class_id, ds.train[1].class_id);
        assert_ne!(ds.train[0].pixels, ds.train[1].pixels);
    }

    #[test]
    fn class_means_are_distinct() {
        let ds = synth_dataset(10, 10, 16, 0).unwrap();
        let means = class_means(&ds);
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                assert!(dist2(&means[a], &means[b]) > 0.0, "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn nearest_mean_on_pixels_beats_chance() {
        let ds = synth_dataset(10, 20, 16, 0).unwrap();
        let means = class_means(&ds);
        let correct = ds
            .val
            .iter()
            .filter(|img| {
                let pred = (0..means.len())
                    .min_by(|&a, &b| {
                        dist2(img.pixels.data(), &means[a]).total_cmp(&dist2(img.pixels.data(), &means[b]))
                    })
                    .unwrap();
                pred == img.class_id
            })
            .count();
        assert!(correct as f64 / ds.val.len() as f64 > 0.1);
    }
}
