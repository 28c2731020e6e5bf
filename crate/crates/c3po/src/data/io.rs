//! On-disk dataset layout: `t0/`, `t1/` and `mask/` directories of PNG files
//! with matching basenames. Images are 8-bit RGB; masks are 8-bit grayscale
//! holding raw class indices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::ChangeSample;
use crate::error::{Error, Result};

pub const SUBDIRS: [&str; 3] = ["t0", "t1", "mask"];

/// Samples plus the warnings raised while loading them.
#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<ChangeSample>,
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// Planar `[0, 1]` floats from an RGB image.
pub fn rgb_to_planar(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            out[k * w * h + i] = px.0[k] as f32 / 255.0;
        }
    }
    out
}

/// The inverse of [`rgb_to_planar`] (values are rounded to 8 bits).
pub fn planar_to_rgb(data: &[f32], width: usize, height: usize) -> RgbImage {
    let plane = width * height;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        image::Rgb([0, 1, 2].map(|k| (data[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Loads one RGB image as planar floats with its size.
pub fn load_image(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = read_rgb(path)?;
    Ok((rgb_to_planar(&img), img.width() as usize, img.height() as usize))
}

/// Reads every complete `(t0, t1, mask)` triple under `root` in basename order.
/// With `binary` set, any nonzero mask value becomes 1.
pub fn load_dataset(root: &Path, binary: bool) -> Result<LoadedDataset> {
    let dirs = SUBDIRS.map(|d| root.join(d));
    for d in &dirs {
        if !d.is_dir() {
            return Err(Error::Data(format!("dataset directory {} is missing", d.display())));
        }
    }
    let [t0s, t1s, masks] = [png_stems(&dirs[0])?, png_stems(&dirs[1])?, png_stems(&dirs[2])?];
    let all: BTreeSet<&String> = t0s.keys().chain(t1s.keys()).chain(masks.keys()).collect();
    let mut out = LoadedDataset::default();
    for name in all {
        let (Some(p0), Some(p1), Some(pm)) = (t0s.get(name), t1s.get(name), masks.get(name)) else {
            let msg = format!("skipping {name}: missing counterpart in one of t0/, t1/, mask/");
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        };
        let (a, b, m) = (read_rgb(p0)?, read_rgb(p1)?, read_gray(pm)?);
        if a.dimensions() != b.dimensions() || a.dimensions() != m.dimensions() {
            return Err(Error::Data(format!(
                "size mismatch for {name}: t0 {:?}, t1 {:?}, mask {:?}",
                a.dimensions(),
                b.dimensions(),
                m.dimensions()
            )));
        }
        let mask = m
            .into_raw()
            .into_iter()
            .map(|v| if binary { u8::from(v != 0) } else { v })
            .collect();
        out.samples.push(ChangeSample {
            name: name.clone(),
            width: a.width() as usize,
            height: a.height() as usize,
            t0: rgb_to_planar(&a),
            t1: rgb_to_planar(&b),
            mask,
            change_types: BTreeSet::new(),
        });
    }
    Ok(out)
}

/// Writes samples in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, samples: &[ChangeSample]) -> Result<()> {
    for d in SUBDIRS {
        let dir = root.join(d);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let file = format!("{}.png", s.name);
        save_rgb(&root.join("t0").join(&file), &planar_to_rgb(&s.t0, s.width, s.height))?;
        save_rgb(&root.join("t1").join(&file), &planar_to_rgb(&s.t1, s.width, s.height))?;
        save_mask(&root.join("mask").join(&file), &s.mask, s.width, s.height)?;
    }
    Ok(())
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Saves a class-index mask as an 8-bit grayscale PNG.
pub fn save_mask(path: &Path, mask: &[u8], width: usize, height: usize) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, mask.to_vec())
        .ok_or_else(|| Error::Data(format!("mask for {} has the wrong size", path.display())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
