//! Synthetic segmentation data: a textured background (class 0) with a few
//! non-overlapping rectangles, discs and triangles on top.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Image;

const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 64;
const PIXEL_NOISE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Rectangle,
    Disc,
    Triangle,
}

/// Classes 1, 2, 3 are rectangle, disc, triangle; higher classes reuse the
/// kinds in the same order with their own colors.
fn kind_of(class: usize) -> Kind {
    match (class - 1) % 3 {
        0 => Kind::Rectangle,
        1 => Kind::Disc,
        _ => Kind::Triangle,
    }
}

fn class_color(class: usize) -> [f64; 3] {
    match class {
        1 => [0.85, 0.25, 0.2],
        2 => [0.2, 0.35, 0.85],
        3 => [0.9, 0.8, 0.2],
        _ => {
            // spread further classes around the hue circle
            let h = (class as f64 * 0.618_034).fract() * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    /// Overlap test with a one pixel gap so shapes never touch.
    fn near(&self, o: &Rect) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }
}

struct Shape {
    kind: Kind,
    class: u8,
    bounds: Rect,
    // triangle apex position along the top edge and orientation
    apex: f64,
    upside_down: bool,
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let b = self.bounds;
        if x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1 {
            return false;
        }
        let (w, h) = ((b.x1 - b.x0) as f64, (b.y1 - b.y0) as f64);
        let px = x as f64 + 0.5 - b.x0 as f64;
        let py = y as f64 + 0.5 - b.y0 as f64;
        match self.kind {
            Kind::Rectangle => true,
            Kind::Disc => {
                let (dx, dy) = (px - w / 2.0, py - h / 2.0);
                dx * dx + dy * dy <= (w / 2.0) * (w / 2.0)
            }
            Kind::Triangle => {
                let py = if self.upside_down { h - py } else { py };
                let ax = self.apex * w;
                // apex at (ax, 0), base from (0, h) to (w, h)
                let left = (px - ax) * h - (0.0 - ax) * py;
                let right = (w - ax) * py - (px - ax) * h;
                left >= 0.0 && right >= 0.0
            }
        }
    }
}

fn place<R: Rng>(rng: &mut R, w: usize, h: usize, taken: &[Rect], kind: Kind) -> Option<Rect> {
    let short = w.min(h);
    let lo = (short / 6).max(3);
    let hi = (short / 3).max(lo + 1);
    for _ in 0..PLACEMENT_TRIES {
        let sw = rng.random_range(lo..hi).min(w);
        let sh = if kind == Kind::Disc {
            sw
        } else {
            rng.random_range(lo..hi)
        }
        .min(h);
        let x0 = rng.random_range(0..=w - sw);
        let y0 = rng.random_range(0..=h - sh);
        let r = Rect {
            x0,
            y0,
            x1: x0 + sw,
            y1: y0 + sh,
        };
        if !taken.iter().any(|t| t.near(&r)) {
            return Some(r);
        }
    }
    None
}

fn generate_one<R: Rng>(rng: &mut R, w: usize, h: usize, classes: usize) -> Sample {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid deviation");

    // Shape count lies in lo..=4 where lo lets the first shapes cover every
    // foreground class at least once.
    let fg = classes - 1;
    let lo = fg.clamp(1, MAX_SHAPES);
    let count = rng.random_range(lo..=MAX_SHAPES);
    let mut order: Vec<usize> = (1..classes).collect();
    order.shuffle(rng);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut taken = Vec::with_capacity(count);
    for i in 0..count {
        let class = if i < order.len() {
            order[i]
        } else {
            rng.random_range(1..classes)
        };
        let kind = kind_of(class);
        let Some(bounds) = place(rng, w, h, &taken, kind) else {
            continue;
        };
        taken.push(Rect {
            x0: bounds.x0.saturating_sub(1),
            y0: bounds.y0.saturating_sub(1),
            x1: bounds.x1,
            y1: bounds.y1,
        });
        shapes.push(Shape {
            kind,
            class: class as u8,
            bounds,
            apex: rng.random_range(0.2..0.8),
            upside_down: rng.random_bool(0.5),
        });
    }

    let labels = LabelMap::from_fn(w, h, |x, y| {
        shapes
            .iter()
            .find(|s| s.contains(x, y))
            .map_or(0, |s| s.class)
    });

    let mut tint = |base: [f64; 3], spread: f64| base.map(|v| v + rng.random_range(-spread..=spread));
    let background = tint([0.45, 0.5, 0.4], 0.08);
    let mut colors = vec![background];
    colors.extend((1..classes).map(|c| tint(class_color(c), 0.06)));
    let (fx, fy) = (
        rng.random_range(1.0..4.0) * std::f64::consts::TAU / w as f64,
        rng.random_range(1.0..4.0) * std::f64::consts::TAU / h as f64,
    );
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut image = Image::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let class = labels.get(x, y) as usize;
            let texture = if class == 0 {
                0.08 * (fx * x as f64 + phase).sin() * (fy * y as f64).cos()
            } else {
                0.0
            };
            for c in 0..3 {
                let v = colors[class][c] + texture + noise.sample(rng);
                // 8-bit levels so the sample survives a PNG round trip
                image.set(c, y, x, quantize(v));
            }
        }
    }
    Sample { image, labels }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// `n` samples of size `w x h` with classes `0..classes`. The same seed
/// always yields the same samples.
pub fn generate_shapes_dataset(
    n: usize,
    w: usize,
    h: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "the shapes dataset needs at least 2 classes, got {classes}"
        )));
    }
    if classes > 256 {
        return Err(Error::InvalidParameter(format!(
            "labels are stored as bytes, {classes} classes do not fit"
        )));
    }
    if w < 4 || h < 4 {
        return Err(Error::InvalidParameter(format!(
            "shapes need at least 4x4 pixels, got {w}x{h}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| generate_one(&mut rng, w, h, classes)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_shapes_dataset(5, 32, 24, 4, 11).unwrap();
        let b = generate_shapes_dataset(5, 32, 24, 4, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_shapes_dataset(5, 32, 24, 4, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_below_class_count() {
        for classes in [2, 3, 5, 9] {
            for s in generate_shapes_dataset(10, 40, 40, classes, 3).unwrap() {
                assert!(s.labels.check_classes(classes).is_ok());
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn every_class_in_at_least_ninety_percent() {
        let data = generate_shapes_dataset(100, 64, 64, 3, 0).unwrap();
        let mut present = [0usize; 3];
        for s in &data {
            for (c, n) in s.labels.histogram(3).into_iter().enumerate() {
                if n > 0 {
                    present[c] += 1;
                }
            }
        }
        assert!(present.iter().all(|&p| p >= 90), "{present:?}");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_shapes_dataset(1, 16, 16, 1, 0).is_err());
        assert!(generate_shapes_dataset(1, 2, 16, 3, 0).is_err());
        assert!(generate_shapes_dataset(0, 16, 16, 3, 0).unwrap().is_empty());
    }

    #[test]
    fn shapes_do_not_touch() {
        // every foreground pixel's 4-neighbors are background or the same class
        for s in generate_shapes_dataset(20, 48, 48, 4, 5).unwrap() {
            let l = &s.labels;
            for y in 0..47 {
                for x in 0..47 {
                    let c = l.get(x, y);
                    for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                        let d = l.get(nx, ny);
                        assert!(c == 0 || d == 0 || c == d);
                    }
                }
            }
        }
    }

    #[test]
    fn triangle_is_inside_its_box_and_nonempty() {
        let s = Shape {
            kind: Kind::Triangle,
            class: 3,
            bounds: Rect {
                x0: 2,
                y0: 2,
                x1: 12,
                y1: 10,
            },
            apex: 0.5,
            upside_down: false,
        };
        let inside: usize = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .filter(|&(x, y)| s.contains(x, y))
            .count();
        // roughly half the 10x8 box
        assert!((30..=50).contains(&inside), "{inside}");
        assert!(s.contains(7, 8));
        assert!(!s.contains(2, 2));
    }
}
