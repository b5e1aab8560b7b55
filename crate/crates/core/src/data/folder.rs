//! `<root>/<species>/<index>.png` image folders (one folder per domain).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};

use super::{normalize, quantize, ImageSample};
use crate::error::{Error, Result};

/// Write `samples` under `domain_root/<class_names[label]>/<index>.png` as
/// 8-bit grayscale, numbering each species directory from zero. Returns the
/// number of files written.
pub fn write_image_folder(samples: &[ImageSample], domain_root: &Path, class_names: &[&str]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::data("nothing to write"));
    }
    let mut next_index = vec![0usize; class_names.len()];
    for name in class_names {
        let dir = domain_root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let name = class_names.get(s.class_label).ok_or(Error::InvalidLabel {
            label: s.class_label,
            bound: class_names.len(),
        })?;
        let idx = next_index[s.class_label];
        next_index[s.class_label] += 1;
        let path = domain_root.join(name).join(format!("{idx:05}.png"));
        let img = GrayImage::from_raw(s.width as u32, s.height as u32, quantize(&s.pixels))
            .ok_or_else(|| Error::shape(format!("{}x{} image with {} pixels", s.width, s.height, s.pixels.len())))?;
        img.save(&path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(samples.len())
}

/// Species directory names under `domain_root`, sorted lexicographically.
pub fn species_dirs(domain_root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(domain_root).map_err(|e| Error::io(domain_root, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(domain_root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Load every PNG/PGM under `domain_root/<species>/`, labelling classes by the
/// sorted position of the species directory. Empty species directories are
/// logged and skipped (their label is still reserved).
pub fn load_image_folder(domain_root: &Path, domain_label: usize) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for (label, species) in species_dirs(domain_root)?.iter().enumerate() {
        let dir = domain_root.join(species);
        let files = image_files(&dir)?;
        if files.is_empty() {
            log::warn!("class directory {} is empty", dir.display());
            continue;
        }
        for path in files {
            let img = ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| Error::Ingestion {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
                .decode()
                .map_err(|e| Error::Ingestion {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
                .into_luma8();
            out.push(ImageSample {
                pixels: normalize(img.as_raw()),
                height: img.height() as usize,
                width: img.width() as usize,
                class_label: label,
                domain_label,
                source_path: Some(path.to_string_lossy().into_owned()),
            });
        }
    }
    Ok(out)
}
