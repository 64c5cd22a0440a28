//! Binary checkpoints (`LRCK`).
//!
//! Layout, little-endian: magic `LRCK`, `u32` version, the configuration
//! text, a model tensor table, an optimizer tensor table, both optimizer
//! step counts, training progress, the noise RNG state and a SHA-256 of all
//! preceding bytes. The configuration and RNG algorithm id carry a `u32`
//! length prefix; a tensor entry is `u16 name length, name, u8 rank,
//! u32 dims…, f32 data…`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{Progress, Trainer};

const MAGIC: &[u8; 4] = b"LRCK";
const VERSION: u32 = 1;
const RNG_ID: &str = "chacha8";

/// Serialized ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Generator and discriminator parameters and buffers.
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Adam moments.
    pub optimizer: Vec<(String, Tensor<f32>)>,
    /// Adam step counts of the generator and the discriminator.
    pub adam_steps: [u64; 2],
    pub progress: Progress,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn table(&mut self, t: &[(String, Tensor<f32>)]) {
        self.u32(t.len() as u32);
        debug_assert!(t.iter().all(|(n, _)| n.len() <= u16::MAX as usize));
        for (name, tensor) in t {
            self.0.extend_from_slice(&(name.len() as u16).to_le_bytes());
            self.0.extend_from_slice(name.as_bytes());
            self.u8(tensor.rank() as u8);
            for &d in tensor.shape() {
                self.u32(d as u32);
            }
            for &v in tensor.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
    fn table(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
            let bytes = self.take(len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

fn bad(msg: &str) -> Error {
    Error::Invalid(format!("checkpoint: {msg}"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.table(&self.tensors);
        w.table(&self.optimizer);
        w.u64(self.adam_steps[0]);
        w.u64(self.adam_steps[1]);
        w.u64(self.progress.step);
        w.u64(self.progress.epoch as u64);
        w.u64(self.progress.batch as u64);
        w.str(RNG_ID);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 32 || &buf[..4] != MAGIC {
            return Err(bad("not an LRCK file"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let config_text = r.str()?;
        let tensors = r.table()?;
        let optimizer = r.table()?;
        let adam_steps = [r.u64()?, r.u64()?];
        let progress = Progress { step: r.u64()?, epoch: r.u64()? as usize, batch: r.u64()? as usize };
        let rng_id = r.str()?;
        if rng_id != RNG_ID {
            return Err(bad(&format!("unsupported RNG `{rng_id}`")));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config_text, tensors, optimizer, adam_steps, progress, rng: RngState { seed, stream, word_pos } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Invalid(msg) => Error::format(path, msg),
            other => other,
        })
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        let owned = |v: Vec<(&str, &Tensor<f32>)>| v.into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>();
        let mut tensors = owned(self.g_store.named_tensors());
        tensors.extend(owned(self.d_store.named_tensors()));
        let mut optimizer = self.g_opt.state(&self.g_store, "adam.gen");
        optimizer.extend(self.d_opt.state(&self.d_store, "adam.disc"));
        Checkpoint {
            config_text: self.config.to_text(),
            tensors,
            optimizer,
            adam_steps: [self.g_opt.t, self.d_opt.t],
            progress: self.progress,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuilds a trainer exactly where the checkpoint left off.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ck.config_text)?;
        let mut t = Trainer::new(config)?;
        let expected = t.g_store.named_tensors().len() + t.d_store.named_tensors().len();
        if ck.tensors.len() != expected {
            return Err(Error::Invalid(format!("checkpoint holds {} tensors, model has {expected}", ck.tensors.len())));
        }
        for (name, tensor) in &ck.tensors {
            let store = if name.starts_with("disc.") { &mut t.d_store } else { &mut t.g_store };
            store.set_named(name, tensor.clone())?;
        }
        t.g_opt.load_state(&t.g_store, "adam.gen", &ck.optimizer, ck.adam_steps[0])?;
        t.d_opt.load_state(&t.d_store, "adam.disc", &ck.optimizer, ck.adam_steps[1])?;
        t.progress = ck.progress;
        t.rng = ck.rng.restore();
        Ok(t)
    }
}
