//! Image/ground-truth pairing by shared stem, e.g. `ISIC_0000000.jpg` with
//! `ISIC_0000000_segmentation.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const TRUTH_SUFFIX: &str = "_segmentation";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub truth: Option<PathBuf>,
}

/// Entries sorted by stem.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

/// Stem of an image-like file, with any `_segmentation` suffix removed.
pub fn file_stem(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    Some(stem.strip_suffix(TRUTH_SUFFIX).unwrap_or(stem).to_string())
}

/// Image-like files in `dir` keyed by stem. Duplicate stems are an error.
pub fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    files_by_stem_where(dir, |_| true)
}

fn files_by_stem_where(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let raw = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if !path.is_file() || !keep(raw) {
            continue;
        }
        if let Some(stem) = file_stem(&path) {
            if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate stem `{stem}`: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn suffixed_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    files_by_stem_where(dir, |raw| raw.ends_with(TRUTH_SUFFIX))
}

impl DatasetIndex {
    /// Images from `image_dir`; truths from `truth_dir` when given. When the
    /// directories coincide, files carrying the truth suffix are treated as
    /// masks.
    pub fn scan(image_dir: &Path, truth_dir: Option<&Path>) -> Result<Self> {
        let mut images = BTreeMap::new();
        let read = std::fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))?;
        for entry in read {
            let path = entry.map_err(|e| Error::io(image_dir, e))?.path();
            let Some(raw) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            if raw.ends_with(TRUTH_SUFFIX) || !path.is_file() {
                continue;
            }
            if let Some(stem) = file_stem(&path) {
                if images.insert(stem.clone(), path).is_some() {
                    return Err(Error::invalid(format!("duplicate image stem `{stem}`")));
                }
            }
        }
        let truths = match truth_dir {
            Some(dir) if same_dir(dir, image_dir) => suffixed_by_stem(dir)?,
            Some(dir) => files_by_stem(dir)?,
            None => BTreeMap::new(),
        };
        let entries = images
            .into_iter()
            .map(|(stem, image)| DatasetEntry {
                truth: truths.get(&stem).cloned(),
                stem,
                image,
            })
            .collect();
        Ok(Self { entries })
    }

    /// `<root>/images` and `<root>/masks`.
    pub fn scan_root(root: &Path) -> Result<Self> {
        let masks = root.join(MASKS_DIR);
        Self::scan(&root.join(IMAGES_DIR), masks.is_dir().then_some(masks.as_path()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
