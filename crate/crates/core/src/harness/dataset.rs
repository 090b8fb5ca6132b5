//! Loading a dataset directory into a dictionary.
//!
//! Layout: one subdirectory per numeric subject label holding `.pgm` files,
//! an optional `outside/` directory of outside-data images, and an optional
//! `heldout/` directory that is never loaded.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dictionary::{Dictionary, Label};
use crate::error::{MrlrError, Result};
use crate::harness::pgm::load_pgm;
use crate::harness::synth::{HELDOUT_DIR, OUTSIDE_DIR};
use crate::image::{warp, Frame, Image};
use crate::transform::{Rect, SimilarityParams};

/// Fits an image into the frame: unchanged when the sizes agree, otherwise
/// resampled so the image width spans the frame width.
pub fn crop_to_frame(img: Image, frame: Frame) -> Result<Image> {
    if img.frame() == frame {
        return Ok(img);
    }
    let rect = Rect {
        x: 0.0,
        y: 0.0,
        width: img.width() as f64,
        height: img.height() as f64,
    };
    warp(&img, &SimilarityParams::from_rect(rect, frame)?, frame)
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| super::with_path(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")));
    files.sort();
    Ok(files)
}

fn load_dir(dir: &Path, frame: Frame) -> Result<Vec<Image>> {
    pgm_files(dir)?
        .iter()
        .map(|p| crop_to_frame(load_pgm(p)?, frame))
        .collect()
}

/// Training images and labels, ascending by label then file name, plus the
/// outside images when `with_outside` is set.
pub fn load_dataset(root: &Path, frame: Frame, with_outside: bool) -> Result<(Vec<Image>, Vec<Label>, Vec<Image>)> {
    let mut subjects: Vec<(Label, PathBuf)> = Vec::new();
    let mut outside_dir = None;
    for entry in fs::read_dir(root).map_err(|e| super::with_path(root, e))? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name == OUTSIDE_DIR {
            outside_dir = Some(path);
        } else if name == HELDOUT_DIR {
            continue;
        } else {
            let label: Label = name.parse().map_err(|_| {
                MrlrError::Format(format!("{}: subject directories must be named by numeric label", path.display()))
            })?;
            subjects.push((label, path));
        }
    }
    subjects.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in &subjects {
        let imgs = load_dir(dir, frame)?;
        labels.extend(std::iter::repeat_n(*label, imgs.len()));
        images.extend(imgs);
    }
    if images.is_empty() {
        return Err(MrlrError::InvalidInput(format!("{}: no training images found", root.display())));
    }
    let outside = match (with_outside, outside_dir) {
        (true, Some(dir)) => load_dir(&dir, frame)?,
        (true, None) => {
            return Err(MrlrError::InvalidInput(format!("{}: no outside/ directory", root.display())))
        }
        (false, _) => Vec::new(),
    };
    Ok((images, labels, outside))
}

pub fn build_dictionary(root: &Path, frame: Frame, with_outside: bool) -> Result<Dictionary> {
    let (images, labels, outside) = load_dataset(root, frame, with_outside)?;
    Dictionary::build(&images, &labels, frame)?.augment_with_outside(&outside, frame)
}

pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    fs::write(path, dict.to_bytes())?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    Dictionary::from_bytes(&super::read_file(path)?)
}
