//! Big-endian IDX files as used by the MNIST distribution.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const IMAGES_FILE: &str = "train-images-idx3-ubyte";
pub const LABELS_FILE: &str = "train-labels-idx1-ubyte";

/// Grayscale digits with labels, pixels in `0..=255`.
#[derive(Clone, Debug)]
pub struct DigitSource {
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

impl DigitSource {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 || labels.is_empty() || pixels.len() != rows * cols * labels.len() {
            return Err(Error::Invalid(format!(
                "digit source: {} pixels do not hold {} images of {rows}×{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { rows, cols, pixels, labels })
    }

    /// Reads `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(IMAGES_FILE), &dir.join(LABELS_FILE))
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let img = fs::read(images).map_err(|e| Error::io(images, e))?;
        let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
        let (rows, cols, pixels) = parse_images(&img).map_err(|m| Error::format(images, m))?;
        let labels_v = parse_labels(&lab).map_err(|m| Error::format(labels, m))?;
        if pixels.len() / (rows * cols) != labels_v.len() {
            return Err(Error::format(labels, format!("{} labels for {} images", labels_v.len(), pixels.len() / (rows * cols))));
        }
        Self::new(rows, cols, pixels, labels_v)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Digits `range` as a new source.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Invalid(format!("digit range {range:?} outside 0..{}", self.len())));
        }
        let n = self.rows * self.cols;
        Self::new(self.rows, self.cols, self.pixels[range.start * n..range.end * n].to_vec(), self.labels[range].to_vec())
    }
}

pub fn parse_images(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGES_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()));
    }
    Ok((rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    let magic = be_u32(bytes, 0);
    if magic != LABELS_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(format!("expected {n} labels, found {}", bytes.len() - 8));
    }
    Ok(bytes[8..].to_vec())
}

/// Encodes images in IDX form; used to build fixtures.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
