//! Samples, label maps and everything needed to get them in and out of the
//! network: one-hot encoding, resizing, augmentation, a synthetic shapes
//! generator and PNG storage.

mod augment;
mod io;
mod palette;
mod resize;
mod shapes;

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentConfig};
pub use io::{
    load_image_png, load_label_png, load_png_pair, read_dataset, save_image_png, save_label_png,
    save_png_pair, write_dataset, DatasetIndex, IMAGES_DIR, INDEX_FILE, LABELS_DIR, PALETTE_FILE,
};
pub use palette::ClassPalette;
pub use resize::{resize_image, resize_labels};
pub use shapes::generate_shapes_dataset;

use crate::error::{Error, Result};
use crate::tensor::{Image, Real, SegMap, Tensor};

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels cannot fill a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    /// Largest index present, or `None` for an empty map.
    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Pixel count per class for classes `0..classes`; larger indices are
    /// ignored.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &c in &self.data {
            if let Some(slot) = h.get_mut(c as usize) {
                *slot += 1;
            }
        }
        h
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&c| c as usize >= classes)
        {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "label {} at pixel ({}, {}) is not below the class count {classes}",
                self.data[i],
                i % self.width,
                i / self.width
            ))),
        }
    }
}

/// An RGB image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image<f32>,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Image<f32>, labels: LabelMap) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "images need 3 channels, got {}",
                image.channels()
            )));
        }
        if image.width() != labels.width() || image.height() != labels.height() {
            return Err(Error::Shape(format!(
                "image is {}x{} but labels are {}x{}",
                image.width(),
                image.height(),
                labels.width(),
                labels.height()
            )));
        }
        Ok(Self { image, labels })
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }
}

/// `classes x H x W` tensor with a single 1 per pixel.
pub fn one_hot_encode<F: Real>(labels: &LabelMap, classes: usize) -> Result<SegMap<F>> {
    labels.check_classes(classes)?;
    let (w, h) = (labels.width(), labels.height());
    let mut out = Tensor::zeros(classes, h, w);
    let plane = w * h;
    for (i, &c) in labels.data().iter().enumerate() {
        out.data_mut()[c as usize * plane + i] = F::one();
    }
    Ok(out)
}

/// Checks that every pixel of `seg` is exactly one-hot.
pub fn check_one_hot<F: Real>(seg: &SegMap<F>) -> Result<()> {
    let plane = seg.plane_len();
    for i in 0..plane {
        let mut ones = 0;
        for c in 0..seg.channels() {
            let v = seg.data()[c * plane + i];
            if v == F::one() {
                ones += 1;
            } else if v != F::zero() {
                return Err(Error::Validation(format!(
                    "segmentation value {v:?} at channel {c}, pixel {i} is not 0 or 1"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::Validation(format!(
                "pixel {i} has {ones} active classes"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel() {
        let m = LabelMap::new(1, 1, vec![2]).unwrap();
        let s = one_hot_encode::<f32>(&m, 4).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let m = LabelMap::new(2, 1, vec![0, 3]).unwrap();
        let err = one_hot_encode::<f32>(&m, 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("(1, 0)"));
    }

    #[test]
    fn check_one_hot_flags_soft_values() {
        let mut s = one_hot_encode::<f64>(&LabelMap::filled(2, 2, 1), 2).unwrap();
        assert!(check_one_hot(&s).is_ok());
        s.data_mut()[0] = 0.5;
        assert!(check_one_hot(&s).is_err());
        let zeros = SegMap::<f64>::zeros(2, 1, 1);
        assert!(check_one_hot(&zeros).is_err());
    }

    #[test]
    fn sample_checks_dims() {
        let img = Image::<f32>::zeros(3, 4, 5);
        assert!(Sample::new(img.clone(), LabelMap::filled(5, 4, 0)).is_ok());
        assert!(Sample::new(img, LabelMap::filled(4, 5, 0)).is_err());
        assert!(Sample::new(Image::zeros(1, 4, 5), LabelMap::filled(5, 4, 0)).is_err());
    }

    fn label_maps(classes: u8) -> impl Strategy<Value = LabelMap> {
        (1usize..10, 1usize..10).prop_flat_map(move |(w, h)| {
            proptest::collection::vec(0..classes, w * h)
                .prop_map(move |d| LabelMap::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn one_hot_is_exact(m in label_maps(5)) {
            let s = one_hot_encode::<f32>(&m, 5).unwrap();
            prop_assert!(check_one_hot(&s).is_ok());
            let plane = s.plane_len();
            for (i, &c) in m.data().iter().enumerate() {
                prop_assert_eq!(s.data()[c as usize * plane + i], 1.0);
            }
        }
    }
}
