//! Locating images, label maps and palettes on disk.

use std::fs;
use std::path::{Path, PathBuf};

use rdseg::dataset::{ClassPalette, DatasetIndex, IMAGES_DIR, INDEX_FILE, LABELS_DIR, PALETTE_FILE};

use crate::error::{io_failure, Failure, Outcome};

/// Sorted stems of the `.png` files directly inside `dir`.
pub fn png_stems(dir: &Path) -> Outcome<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_failure(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Named PNG files of one kind (images or labels).
#[derive(Debug, Clone)]
pub struct PngSet {
    pub dir: PathBuf,
    pub names: Vec<String>,
}

impl PngSet {
    /// `root/<sub>` of a split (ordered by its index file when present),
    /// otherwise the PNGs directly in `root`.
    pub fn locate(root: &Path, sub: &str) -> Outcome<Self> {
        if !root.is_dir() {
            return Err(Failure::Io(format!("{} is not a directory", root.display())));
        }
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Ok(Self {
                names: png_stems(root)?,
                dir: root.to_path_buf(),
            });
        }
        let index = root.join(INDEX_FILE);
        let names = if index.is_file() {
            let text = fs::read_to_string(&index).map_err(|e| io_failure(&index, e))?;
            DatasetIndex::from_text(&text)?.names
        } else {
            png_stems(&dir)?
        };
        Ok(Self { dir, names })
    }

    pub fn images(root: &Path) -> Outcome<Self> {
        Self::locate(root, IMAGES_DIR)
    }

    pub fn labels(root: &Path) -> Outcome<Self> {
        Self::locate(root, LABELS_DIR)
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.dir.join(format!("{}.png", self.names[i]))
    }
}

pub fn read_palette(path: &Path) -> Outcome<ClassPalette> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Ok(ClassPalette::from_text(&text)?)
}

/// The explicit palette file, else the first `palette.txt` found in
/// `roots`, else the synthetic palette for `fallback_classes`.
pub fn resolve_palette(
    flag: Option<&Path>,
    roots: &[&Path],
    fallback_classes: Option<usize>,
) -> Outcome<ClassPalette> {
    if let Some(p) = flag {
        return read_palette(p);
    }
    for root in roots {
        let p = root.join(PALETTE_FILE);
        if p.is_file() {
            return read_palette(&p);
        }
    }
    match fallback_classes {
        Some(c) => ClassPalette::synthetic(c).map_err(|_| {
            Failure::Validation(format!(
                "no palette found for {c} classes; pass --palette"
            ))
        }),
        None => Err(Failure::Validation("no palette found; pass --palette".into())),
    }
}
