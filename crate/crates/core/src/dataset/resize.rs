//! Resampling with half-pixel centers: output pixel `i` of `n` samples the
//! input at `(i + 0.5) * in / n - 0.5`, clamped to the border.

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_dims(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter(format!(
            "cannot resize to {w}x{h}"
        )));
    }
    Ok(())
}

/// Source index pair and weight of the second one for each output index.
fn bilinear_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[inline]
fn nearest_index(i: usize, out: usize, input: usize) -> usize {
    // floor((i + 0.5) * input / out) in integers
    (((2 * i + 1) * input) / (2 * out)).min(input - 1)
}

/// Bilinear resize of every channel. Used for images and for continuous
/// segmentation estimates.
pub fn resize_image<F: Real>(image: &Tensor<F>, new_w: usize, new_h: usize) -> Result<Tensor<F>> {
    check_dims(new_w, new_h)?;
    let (c, h, w) = image.shape();
    if (w, h) == (new_w, new_h) {
        return Ok(image.clone());
    }
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter("cannot resize an empty image".into()));
    }
    let xs = bilinear_taps(new_w, w);
    let ys = bilinear_taps(new_h, h);
    let mut out = Vec::with_capacity(c * new_w * new_h);
    for ch in 0..c {
        let plane = image.plane(ch);
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            let (fy, gy) = (F::of(fy), F::of(1.0 - fy));
            for &(x0, x1, fx) in &xs {
                let (fx, gx) = (F::of(fx), F::of(1.0 - fx));
                let top = r0[x0] * gx + r0[x1] * fx;
                let bottom = r1[x0] * gx + r1[x1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    Tensor::from_vec(c, new_h, new_w, out)
}

/// Nearest-neighbor resize; never invents a class.
pub fn resize_labels(labels: &LabelMap, new_w: usize, new_h: usize) -> Result<LabelMap> {
    check_dims(new_w, new_h)?;
    let (w, h) = (labels.width(), labels.height());
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter("cannot resize an empty label map".into()));
    }
    Ok(LabelMap::from_fn(new_w, new_h, |x, y| {
        labels.get(nearest_index(x, new_w, w), nearest_index(y, new_h, h))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn row_upscale_by_two() {
        let img = Tensor::<f64>::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let out = resize_image(&img, 4, 1).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = Tensor::<f32>::from_fn(3, 5, 7, |c, y, x| (c * 31 + y * 7 + x) as f32 / 97.0);
        assert_eq!(resize_image(&img, 7, 5).unwrap(), img);
        let m = LabelMap::from_fn(7, 5, |x, y| ((x + y) % 4) as u8);
        assert_eq!(resize_labels(&m, 7, 5).unwrap(), m);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f32>::filled(3, 6, 4, 0.3);
        for (w, h) in [(1, 1), (3, 2), (9, 13)] {
            let out = resize_image(&img, w, h).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.3));
        }
        let m = LabelMap::filled(5, 3, 2);
        assert_eq!(resize_labels(&m, 8, 8).unwrap(), LabelMap::filled(8, 8, 2));
    }

    #[test]
    fn labels_upscale_to_blocks() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = resize_labels(&m, 4, 4).unwrap();
        assert_eq!(
            up.data(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
    }

    #[test]
    fn zero_dims_rejected() {
        let img = Tensor::<f32>::zeros(3, 2, 2);
        assert!(matches!(resize_image(&img, 0, 2), Err(Error::InvalidParameter(_))));
        assert!(matches!(
            resize_labels(&LabelMap::filled(2, 2, 0), 2, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn halving_averages_neighbors() {
        // 4 -> 2 samples at 0.5 and 2.5
        let img = Tensor::<f64>::from_vec(1, 1, 4, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(resize_image(&img, 2, 1).unwrap().data(), &[0.5, 3.0]);
    }

    proptest! {
        #[test]
        fn labels_never_gain_classes(
            (w, h, data) in (1usize..9, 1usize..9)
                .prop_flat_map(|(w, h)| (Just(w), Just(h), proptest::collection::vec(0u8..6, w * h))),
            nw in 1usize..20,
            nh in 1usize..20,
        ) {
            let m = LabelMap::new(w, h, data).unwrap();
            let out = resize_labels(&m, nw, nh).unwrap();
            let before = m.histogram(6);
            for (c, n) in out.histogram(6).into_iter().enumerate() {
                prop_assert!(n == 0 || before[c] > 0);
            }
        }

        #[test]
        fn bilinear_stays_within_range(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
            nw in 1usize..12,
            nh in 1usize..12,
        ) {
            let img = Tensor::from_vec(1, 3, 4, data.clone()).unwrap();
            let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_image(&img, nw, nh).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
