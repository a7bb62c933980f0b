//! PNG storage and the on-disk dataset layout:
//!
//! ```text
//! <split>/index.txt        one sample name per line
//! <split>/palette.txt      `r g b name` per class
//! <split>/images/<name>.png
//! <split>/labels/<name>.png
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::{ClassPalette, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Image;

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const INDEX_FILE: &str = "index.txt";
pub const PALETTE_FILE: &str = "palette.txt";

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Ingestion(format!("{}: {e}", path.display()))
}

fn encode_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(source) => Error::io(path, source),
        other => png_error(path, other),
    }
}

/// Decodes any 8/16-bit PNG to packed RGB bytes.
fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| match e {
        png::DecodingError::IoError(source) => Error::io(path, source),
        other => png_error(path, other),
    })?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(png_error(path, "palette was not expanded"));
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * step].chunks_exact(step) {
            if step <= 2 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok((w, h, rgb))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes an RGB image, mapping `[0, 1]` to 8-bit levels.
pub fn save_image_png(path: &Path, image: &Image<f32>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "images need 3 channels, got {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            let v = image.data()[c * n + i];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| encode_error(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| encode_error(path, e))?;
    writer.finish().map_err(|e| encode_error(path, e))
}

pub fn load_image_png(path: &Path) -> Result<Image<f32>> {
    let (w, h, rgb) = read_rgb(path)?;
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = f32::from(px[c]) / 255.0;
        }
    }
    Image::from_vec(3, h, w, data)
}

/// Writes a label map as an indexed PNG whose palette holds the class colors.
pub fn save_label_png(path: &Path, labels: &LabelMap, palette: &ClassPalette) -> Result<()> {
    labels.check_classes(palette.len())?;
    let mut enc = png::Encoder::new(create(path)?, labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.colors().concat());
    let mut writer = enc.write_header().map_err(|e| encode_error(path, e))?;
    writer
        .write_image_data(labels.data())
        .map_err(|e| encode_error(path, e))?;
    writer.finish().map_err(|e| encode_error(path, e))
}

/// Reads a label image of any color type, mapping each color to its class.
pub fn load_label_png(path: &Path, palette: &ClassPalette) -> Result<LabelMap> {
    let (w, h, rgb) = read_rgb(path)?;
    let mut data = Vec::with_capacity(w * h);
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        let color = [px[0], px[1], px[2]];
        let class = palette.class_of(color).ok_or_else(|| {
            Error::Ingestion(format!(
                "{}: color ({}, {}, {}) at pixel ({}, {}) is not in the palette",
                path.display(),
                color[0],
                color[1],
                color[2],
                i % w,
                i / w
            ))
        })?;
        data.push(class);
    }
    LabelMap::new(w, h, data)
}

pub fn load_png_pair(image: &Path, labels: &Path, palette: &ClassPalette) -> Result<Sample> {
    let img = load_image_png(image)?;
    let lab = load_label_png(labels, palette)?;
    Sample::new(img, lab).map_err(|e| png_error(image, e))
}

pub fn save_png_pair(
    sample: &Sample,
    image: &Path,
    labels: &Path,
    palette: &ClassPalette,
) -> Result<()> {
    save_image_png(image, &sample.image)?;
    save_label_png(labels, &sample.labels, palette)
}

/// Sample names of a split, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub names: Vec<String>,
}

impl DatasetIndex {
    pub fn numbered(n: usize) -> Self {
        Self {
            names: (0..n).map(|i| format!("{i:05}")).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if let Some(bad) = names.iter().find(|n| n.contains(['/', '\\'])) {
            return Err(Error::Ingestion(format!(
                "index entry {bad:?} must be a bare file stem"
            )));
        }
        Ok(Self { names })
    }

    pub fn image_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(IMAGES_DIR).join(format!("{}.png", self.names[i]))
    }

    pub fn label_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(LABELS_DIR).join(format!("{}.png", self.names[i]))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a split into `dir` with numbered sample names.
pub fn write_dataset(dir: &Path, samples: &[Sample], palette: &ClassPalette) -> Result<DatasetIndex> {
    for sub in [IMAGES_DIR, LABELS_DIR] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let index = DatasetIndex::numbered(samples.len());
    for (i, s) in samples.iter().enumerate() {
        save_png_pair(s, &index.image_path(dir, i), &index.label_path(dir, i), palette)?;
    }
    write_text(&dir.join(PALETTE_FILE), &palette.to_text())?;
    write_text(&dir.join(INDEX_FILE), &index.to_text())?;
    Ok(index)
}

/// Reads a split written by [`write_dataset`] (or laid out the same way).
/// `palette` overrides the split's own `palette.txt`.
pub fn read_dataset(
    dir: &Path,
    palette: Option<&ClassPalette>,
) -> Result<(Vec<Sample>, ClassPalette, DatasetIndex)> {
    let palette = match palette {
        Some(p) => p.clone(),
        None => ClassPalette::from_text(&read_text(&dir.join(PALETTE_FILE))?)?,
    };
    let index = DatasetIndex::from_text(&read_text(&dir.join(INDEX_FILE))?)?;
    let samples = (0..index.names.len())
        .map(|i| load_png_pair(&index.image_path(dir, i), &index.label_path(dir, i), &palette))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, palette, index))
}
