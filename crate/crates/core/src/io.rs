//! Image grids, histogram plots and the append-only run manifest.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Histogram;
use crate::tensor::Tensor;

/// Separator width between grid tiles, in pixels.
pub const SEPARATOR: usize = 2;

/// Maps `[-1, 1]` linearly onto `0..=255`, rounding to nearest.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

/// Top-left pixel of tile `i`.
pub fn tile_origin(i: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    ((i % cols) * (w + SEPARATOR), (i / cols) * (h + SEPARATOR))
}

/// Renders `n×c×h×w` images (`c` of 1 or 3) row-major into `cols` columns
/// separated by black lines.
pub fn render_grid(images: &Tensor<f32>, cols: usize) -> Result<RgbImage> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) || s[0] == 0 {
        return Err(Error::Shape(format!("grid needs n×(1|3)×h×w images, got {s:?}")));
    }
    if cols == 0 {
        return Err(Error::Invalid("grid needs at least one column".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut img = RgbImage::new(width as u32, height as u32);
    let data = images.data();
    for i in 0..n {
        let (x0, y0) = tile_origin(i, cols, h, w);
        let base = i * c * h * w;
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| quantize(data[base + ch * h * w + y * w + x]);
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(rgb));
            }
        }
    }
    Ok(img)
}

pub fn write_png_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let img = render_grid(images, cols)?;
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// One bar chart panel per histogram, stacked vertically.
pub fn write_histograms_png(hists: &[Histogram], path: &Path) -> Result<()> {
    const PANEL_W: u32 = 240;
    const PANEL_H: u32 = 80;
    let mut img = RgbImage::from_pixel(PANEL_W, PANEL_H * hists.len().max(1) as u32, Rgb([255, 255, 255]));
    for (k, h) in hists.iter().enumerate() {
        let top = k as u32 * PANEL_H;
        let peak = h.counts.iter().copied().max().unwrap_or(0).max(1);
        let bins = h.counts.len().max(1) as u32;
        let bar_w = (PANEL_W / bins).max(1);
        for (b, &c) in h.counts.iter().enumerate() {
            let bar_h = ((c as f64 / peak as f64) * (PANEL_H - 6) as f64).round() as u32;
            for x in (b as u32 * bar_w)..((b as u32 + 1) * bar_w).min(PANEL_W) {
                for y in 0..bar_h {
                    img.put_pixel(x, top + PANEL_H - 1 - y, Rgb([40, 70, 160]));
                }
            }
        }
        for x in 0..PANEL_W {
            img.put_pixel(x, top, Rgb([0, 0, 0]));
        }
    }
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// SHA-256 over `blob <len>\0` followed by the content, as git hashes blobs.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of named tensors: names, shapes and little-endian values in order.
pub fn tensors_hash<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    let mut buf = Vec::new();
    for (name, t) in tensors {
        buf.extend_from_slice(name.as_bytes());
        buf.push(0);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    git_hash(&buf)
}

/// JSON-lines log of a run. Records are only ever appended.
pub struct RunManifest {
    path: PathBuf,
    file: File,
}

impl RunManifest {
    /// Opens (or continues) the manifest and records the run header.
    pub fn open(path: &Path, command: &str, config_text: &str, seed: u64) -> Result<Self> {
        ensure_parent(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self { path: path.to_path_buf(), file };
        m.append(json!({ "kind": "run", "command": command, "seed": seed, "config": config_text }))?;
        Ok(m)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: Value) -> Result<()> {
        let line = record.to_string();
        writeln!(self.file, "{line}").and_then(|_| self.file.flush()).map_err(|e| Error::io(&self.path, e))
    }

    /// Records a written file with its content hash.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.append(json!({ "kind": "artifact", "path": path.display().to_string(), "hash": git_hash(&bytes) }))
    }

    pub fn checkpoint(&mut self, step: u64, path: &Path, params_hash: &str) -> Result<()> {
        self.append(json!({ "kind": "checkpoint", "step": step, "path": path.display().to_string(), "params_hash": params_hash }))?;
        self.artifact(path)
    }

    pub fn epoch(&mut self, epoch: usize, seconds: f64) -> Result<()> {
        self.append(json!({ "kind": "epoch", "epoch": epoch, "seconds": seconds }))
    }

    pub fn metrics(&mut self, row: Value) -> Result<()> {
        self.append(json!({ "kind": "metrics", "values": row }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_map_to_black_and_white() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
    }

    #[test]
    fn git_hash_of_empty_blob() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(git_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn grid_geometry_and_separators() {
        let imgs = Tensor::full(&[5, 1, 3, 4], 1.0f32);
        let g = render_grid(&imgs, 2).unwrap();
        assert_eq!((g.width(), g.height()), (2 * 4 + 2, 3 * 3 + 2 * 2));
        assert_eq!(g.get_pixel(4, 0).0, [0, 0, 0]);
        assert_eq!(g.get_pixel(6, 5).0, [255, 255, 255]);
        // the sixth slot is empty
        assert_eq!(g.get_pixel(7, 11).0, [0, 0, 0]);
    }
}
