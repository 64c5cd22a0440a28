//! `LRDS` binary dataset cache.
//!
//! Layout (little-endian): magic `LRDS`, version, count, H, W, C as `u32`;
//! then per sample the `C×H×W` image as `f32`, the object count as `u8`, per
//! object its `H×W` mask (`f32`), pose (6 × `f32`) and label (`u8`), and
//! finally the background gray level (`f32`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synth::{SynthObject, SynthSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRDS";
pub const VERSION: u32 = 1;

pub fn write_cache(path: &Path, samples: &[SynthSample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Invalid("cannot cache an empty dataset".into()))?;
    let [c, h, w] = *first.image.shape() else {
        return Err(Error::Shape(format!("cached images must be C×H×W, got {:?}", first.image.shape())));
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    for v in [VERSION, samples.len() as u32, h as u32, w as u32, c as u32] {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    let put = |out: &mut BufWriter<File>, vals: &[f32]| -> Result<()> {
        for v in vals {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    };
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", s.image.shape(), first.image.shape())));
        }
        put(&mut out, s.image.data())?;
        let count = u8::try_from(s.objects.len()).map_err(|_| Error::Invalid("too many objects in one sample".into()))?;
        out.write_all(&[count]).map_err(io)?;
        for o in &s.objects {
            if o.mask.len() != h * w {
                return Err(Error::Shape(format!("mask of {} values for a {h}×{w} image", o.mask.len())));
            }
            put(&mut out, &o.mask)?;
            put(&mut out, &o.pose)?;
            out.write_all(&[o.label]).map_err(io)?;
        }
        put(&mut out, &[s.bg_gray])?;
    }
    out.flush().map_err(io)
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "truncated file")
            } else {
                Error::io(self.path, e)
            }
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_cache(path: &Path) -> Result<Vec<SynthSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::format(path, "not an LRDS cache"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported cache version {version}")));
    }
    let (count, h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let image = Tensor::new(&[c, h, w], r.f32s(c * h * w)?)?;
        let objects = (0..r.bytes::<1>()?[0])
            .map(|_| {
                let mask = r.f32s(h * w)?;
                let p = r.f32s(6)?;
                let label = r.bytes::<1>()?[0];
                Ok(SynthObject { label, pose: [p[0], p[1], p[2], p[3], p[4], p[5]], mask })
            })
            .collect::<Result<_>>()?;
        let bg_gray = r.f32s(1)?[0];
        samples.push(SynthSample { image, objects, bg_gray });
    }
    Ok(samples)
}
