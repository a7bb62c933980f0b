use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Ordered class names with the RGB color used for each in label images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    names: Vec<String>,
    colors: Vec<[u8; 3]>,
    lookup: HashMap<[u8; 3], u8>,
}

const SYNTHETIC_COLORS: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [255, 255, 255],
];

impl ClassPalette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 256 {
            return Err(Error::InvalidParameter(format!(
                "a palette needs 1 to 256 classes, got {}",
                entries.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(entries.len());
        for (i, (name, color)) in entries.iter().enumerate() {
            if name.trim().is_empty() || name.contains(['\n', '\r']) {
                return Err(Error::InvalidParameter(format!("class {i} has no usable name")));
            }
            if let Some(prev) = lookup.insert(*color, i as u8) {
                return Err(Error::InvalidParameter(format!(
                    "classes {prev} and {i} share the color {color:?}"
                )));
            }
        }
        let (names, colors) = entries.into_iter().unzip();
        Ok(Self {
            names,
            colors,
            lookup,
        })
    }

    /// The eight UAVid classes in their customary order and colors.
    pub fn uavid() -> Self {
        let entries = [
            ("Building", [128, 0, 0]),
            ("Tree", [0, 128, 0]),
            ("Clutter", [0, 0, 0]),
            ("Road", [128, 64, 128]),
            ("Low vegetation", [128, 128, 0]),
            ("Static car", [192, 0, 192]),
            ("Moving car", [64, 0, 128]),
            ("Human", [64, 64, 0]),
        ];
        Self::from_static(&entries)
    }

    /// The six ISPRS Vaihingen classes.
    pub fn vaihingen() -> Self {
        let entries = [
            ("Impervious surfaces", [255, 255, 255]),
            ("Building", [0, 0, 255]),
            ("Low vegetation", [0, 255, 255]),
            ("Tree", [0, 255, 0]),
            ("Car", [255, 255, 0]),
            ("Clutter", [255, 0, 0]),
        ];
        Self::from_static(&entries)
    }

    /// Palette for the shapes generator: background, rectangle, disc,
    /// triangle, then numbered classes.
    pub fn synthetic(classes: usize) -> Result<Self> {
        if classes == 0 || classes > SYNTHETIC_COLORS.len() {
            return Err(Error::InvalidParameter(format!(
                "the synthetic palette covers 1 to {} classes, got {classes}",
                SYNTHETIC_COLORS.len()
            )));
        }
        let entries = (0..classes)
            .map(|i| {
                let name = match i {
                    0 => "background".to_string(),
                    1 => "rectangle".to_string(),
                    2 => "disc".to_string(),
                    3 => "triangle".to_string(),
                    _ => format!("class {i}"),
                };
                (name, SYNTHETIC_COLORS[i])
            })
            .collect();
        Self::new(entries)
    }

    fn from_static(entries: &[(&str, [u8; 3])]) -> Self {
        Self::new(entries.iter().map(|&(n, c)| (n.to_string(), c)).collect())
            .expect("built-in palettes are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.colors[class]
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u8> {
        self.lookup.get(&color).copied()
    }

    /// One line per class: `r g b name`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, [r, g, b]) in self.names.iter().zip(&self.colors) {
            writeln!(s, "{r} {g} {b} {name}").expect("writing to a string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Ingestion(format!("palette line {}: {line:?}", n + 1));
            let mut parts = line.splitn(4, ' ');
            let mut channel = || -> Result<u8> {
                parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)
            };
            let color = [channel()?, channel()?, channel()?];
            let name = parts.next().map(str::trim).filter(|s| !s.is_empty()).ok_or_else(bad)?;
            entries.push((name.to_string(), color));
        }
        Self::new(entries)
    }
}
