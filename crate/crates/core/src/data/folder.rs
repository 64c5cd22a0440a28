//! Generic folder-of-PNG image loader.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads every `*.png` under `dir` (sorted by file name) as RGB, resized to
/// `size×size` and mapped to `[-1, 1]`. Returns an `n×3×size×size` tensor.
pub fn load_png_folder(dir: &Path, size: usize) -> Result<Tensor<f32>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no PNG files in {}", dir.display())));
    }
    let plane = size * size;
    let mut data = Vec::with_capacity(files.len() * 3 * plane);
    for path in &files {
        let img = image::open(path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        let img = if img.dimensions() == (size as u32, size as u32) {
            img
        } else {
            image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        };
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p.0[c] as f32 / 127.5 - 1.0));
        }
    }
    Tensor::new(&[files.len(), 3, size, size], data)
}
