use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Probabilities and strengths of the random transforms. Flips move image
/// and labels together; the color transforms touch only the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub contrast_p: f64,
    pub saturation_p: f64,
    pub hue_p: f64,
    pub contrast_factor: f64,
    pub saturation_factor: f64,
    pub hue_factor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.0,
            contrast_p: 0.5,
            saturation_p: 0.5,
            hue_p: 0.5,
            contrast_factor: 0.5,
            saturation_factor: 0.5,
            hue_factor: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn none() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            contrast_p: 0.0,
            saturation_p: 0.0,
            hue_p: 0.0,
            ..Self::default()
        }
    }

    /// Default settings plus vertical flips.
    pub fn with_vertical_flips() -> Self {
        Self {
            vflip_p: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("contrast_p", self.contrast_p),
            ("saturation_p", self.saturation_p),
            ("hue_p", self.hue_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        let factors = [
            ("contrast_factor", self.contrast_factor),
            ("saturation_factor", self.saturation_factor),
            ("hue_factor", self.hue_factor),
        ];
        for (name, f) in factors {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be a nonnegative number, got {f}"
                )));
            }
        }
        Ok(())
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let image = Image::from_fn(3, h, w, |c, y, x| sample.image.get(c, y, w - 1 - x));
    let labels = LabelMap::from_fn(w, h, |x, y| sample.labels.get(w - 1 - x, y));
    Sample { image, labels }
}

pub fn flip_vertical(sample: &Sample) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let image = Image::from_fn(3, h, w, |c, y, x| sample.image.get(c, h - 1 - y, x));
    let labels = LabelMap::from_fn(w, h, |x, y| sample.labels.get(x, h - 1 - y));
    Sample { image, labels }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(image: &Image<f32>) -> Vec<f32> {
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
        .collect()
}

/// Blends every pixel with the mean gray level: `gray + a * (v - gray)`.
fn adjust_contrast(image: &mut Image<f32>, a: f32) {
    let l = luma(image);
    let gray = (l.iter().map(|&v| f64::from(v)).sum::<f64>() / l.len().max(1) as f64) as f32;
    for v in image.data_mut() {
        *v = (gray + a * (*v - gray)).clamp(0.0, 1.0);
    }
}

/// Blends every pixel with its own luma.
fn adjust_saturation(image: &mut Image<f32>, a: f32) {
    let l = luma(image);
    for c in 0..3 {
        for (v, &y) in image.plane_mut(c).iter_mut().zip(&l) {
            *v = (y + a * (*v - y)).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` of a full turn.
fn adjust_hue(image: &mut Image<f32>, shift: f32) {
    let n = image.plane_len();
    let data = image.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
    }
}

/// Applies each transform independently with its probability, in the order
/// horizontal flip, vertical flip, contrast, saturation, hue.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if rng.random_bool(cfg.hflip_p) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(cfg.vflip_p) {
        out = flip_vertical(&out);
    }
    let factor = |f: f64, rng: &mut R| rng.random_range(-f..=f);
    if rng.random_bool(cfg.contrast_p) {
        let a = 1.0 + factor(cfg.contrast_factor, rng);
        adjust_contrast(&mut out.image, a as f32);
    }
    if rng.random_bool(cfg.saturation_p) {
        let a = 1.0 + factor(cfg.saturation_factor, rng);
        adjust_saturation(&mut out.image, a as f32);
    }
    if rng.random_bool(cfg.hue_p) {
        let shift = factor(cfg.hue_factor, rng);
        adjust_hue(&mut out.image, shift as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let image = Image::from_fn(3, 5, 6, |c, y, x| {
            ((c * 13 + y * 5 + x * 3) % 17) as f32 / 16.0
        });
        let labels = LabelMap::from_fn(6, 5, |x, y| ((x * y + x) % 3) as u8);
        Sample::new(image, labels).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(augment(&s, &AugmentConfig::none(), &mut rng), s);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
        assert_ne!(flip_horizontal(&s), s);
    }

    #[test]
    fn forced_flips_twice_are_identity() {
        let s = sample();
        let cfg = AugmentConfig {
            hflip_p: 1.0,
            vflip_p: 1.0,
            ..AugmentConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let once = augment(&s, &cfg, &mut rng);
        assert_ne!(once, s);
        assert_eq!(augment(&once, &cfg, &mut rng), s);
    }

    #[test]
    fn color_jitter_keeps_labels_and_range() {
        let s = sample();
        let cfg = AugmentConfig {
            hflip_p: 0.0,
            contrast_p: 1.0,
            saturation_p: 1.0,
            hue_p: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&s, &cfg, &mut rng);
            assert_eq!(out.labels, s.labels);
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flips_keep_label_histogram() {
        let s = sample();
        let cfg = AugmentConfig::with_vertical_flips();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let out = augment(&s, &cfg, &mut rng);
            assert_eq!(out.labels.histogram(3), s.labels.histogram(3));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
        // a third of a turn maps red to green
        let (h, s, v) = rgb_to_hsv(1.0, 0.0, 0.0);
        let (r, g, b) = hsv_to_rgb(h + 1.0 / 3.0, s, v);
        assert!(r.abs() < 1e-6 && (g - 1.0).abs() < 1e-6 && b.abs() < 1e-6);
    }

    #[test]
    fn contrast_factor_one_is_identity() {
        let mut img = sample().image;
        let before = img.clone();
        adjust_contrast(&mut img, 1.0);
        for (a, b) in img.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            hue_p: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            contrast_factor: -0.1,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
