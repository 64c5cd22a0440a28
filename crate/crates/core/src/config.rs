//! Plain-text run configuration: `key = value` lines grouped under
//! `[model]`, `[train]` and `[data]`, with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::generator::{Dataset, ModelConfig};
use crate::variants::VariantKind;

/// Optimization settings and everything needed to rebuild a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Steps between sample grids; 0 disables them.
    pub sample_every: u64,
    /// Literal minimax generator loss instead of the non-saturating one.
    pub minimax: bool,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    /// Directory with IDX digit files or PNG images; falls back to the
    /// environment when empty.
    pub root: Option<PathBuf>,
    pub num_samples: usize,
    pub data_seed: u64,
    /// Optional dataset cache file.
    pub cache: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            seed: 0,
            checkpoint_every: 0,
            sample_every: 0,
            minimax: false,
            data: DataConfig { root: None, num_samples: 5000, data_seed: 0, cache: None },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
            ("epochs", self.epochs as f64),
            ("num_samples", self.data.num_samples as f64),
        ];
        for (k, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("`batch_size` must be at least 2 for batch normalization".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "dataset = {}", m.dataset);
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "channels = {}", m.channels);
        let _ = writeln!(s, "z_dim = {}", m.z_dim);
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "timesteps = {}", m.timesteps);
        let _ = writeln!(s, "s_min = {:?}", m.s_min);
        let _ = writeln!(s, "bg_widths = {}", list(&m.bg_widths));
        let _ = writeln!(s, "fg_widths = {}", list(&m.fg_widths));
        let _ = writeln!(s, "d_widths = {}", list(&m.d_widths));
        let _ = writeln!(s, "variant = {}", m.variant);
        let _ = writeln!(s, "use_lstm = {}", m.use_lstm);
        let _ = writeln!(s, "lambda_rec = {:?}", m.lambda_rec);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_g = {:?}", self.lr_g);
        let _ = writeln!(s, "lr_d = {:?}", self.lr_d);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "adam_eps = {:?}", self.adam_eps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "sample_every = {}", self.sample_every);
        let _ = writeln!(s, "minimax = {}", self.minimax);
        let _ = writeln!(s, "\n[data]");
        if let Some(r) = &self.data.root {
            let _ = writeln!(s, "root = {}", r.display());
        }
        let _ = writeln!(s, "num_samples = {}", self.data.num_samples);
        let _ = writeln!(s, "data_seed = {}", self.data.data_seed);
        if let Some(c) = &self.data.cache {
            let _ = writeln!(s, "cache = {}", c.display());
        }
        s
    }

    /// Parses configuration text. Model keys override the preset of the
    /// named `dataset` (MNIST-ONE when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_sections(text)?;
        let get = |sec: &str, key: &str| entries.get(&(sec.to_string(), key.to_string())).map(|(_, v)| v.as_str());
        let dataset = match get("model", "dataset") {
            Some(d) => d.parse::<Dataset>()?,
            None => Dataset::MnistOne,
        };
        let mut cfg = TrainConfig::new(ModelConfig::preset(dataset));
        for ((sec, key), (line, value)) in &entries {
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            };
            apply(&mut cfg, sec, key, value).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

type Entries = BTreeMap<(String, String), (usize, String)>;

fn parse_sections(text: &str) -> Result<Entries> {
    let mut section = String::from("model");
    let mut out = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "model" | "train" | "data") {
                return Err(Error::Config(format!("line {line_no}: unknown section `[{name}]`")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, found `{line}`")))?;
        let key = k.trim().to_string();
        if out.insert((section.clone(), key.clone()), (line_no, v.trim().to_string())).is_some() {
            return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}` as a {}", std::any::type_name::<T>())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, found `{v}`"))),
    }
}

fn widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num::<usize>(key, p.trim())).collect()
}

fn apply(cfg: &mut TrainConfig, section: &str, key: &str, v: &str) -> Result<()> {
    let m = &mut cfg.model;
    match (section, key) {
        ("model", "dataset") => {}
        ("model", "image_size") => m.image_size = num(key, v)?,
        ("model", "channels") => m.channels = num(key, v)?,
        ("model", "z_dim") => m.z_dim = num(key, v)?,
        ("model", "hidden") => m.hidden = num(key, v)?,
        ("model", "timesteps") => m.timesteps = num(key, v)?,
        ("model", "s_min") => m.s_min = num(key, v)?,
        ("model", "bg_widths") => m.bg_widths = widths(key, v)?,
        ("model", "fg_widths") => m.fg_widths = widths(key, v)?,
        ("model", "d_widths") => m.d_widths = widths(key, v)?,
        ("model", "variant") => m.variant = v.parse::<VariantKind>()?,
        ("model", "use_lstm") => m.use_lstm = flag(key, v)?,
        ("model", "lambda_rec") => m.lambda_rec = num(key, v)?,
        ("train", "batch_size") => cfg.batch_size = num(key, v)?,
        ("train", "lr_g") => cfg.lr_g = num(key, v)?,
        ("train", "lr_d") => cfg.lr_d = num(key, v)?,
        ("train", "beta1") => cfg.beta1 = num(key, v)?,
        ("train", "beta2") => cfg.beta2 = num(key, v)?,
        ("train", "adam_eps") => cfg.adam_eps = num(key, v)?,
        ("train", "epochs") => cfg.epochs = num(key, v)?,
        ("train", "seed") => cfg.seed = num(key, v)?,
        ("train", "checkpoint_every") => cfg.checkpoint_every = num(key, v)?,
        ("train", "sample_every") => cfg.sample_every = num(key, v)?,
        ("train", "minimax") => cfg.minimax = flag(key, v)?,
        ("data", "root") => cfg.data.root = Some(PathBuf::from(v)),
        ("data", "num_samples") => cfg.data.num_samples = num(key, v)?,
        ("data", "data_seed") => cfg.data.data_seed = num(key, v)?,
        ("data", "cache") => cfg.data.cache = Some(PathBuf::from(v)),
        _ => return Err(Error::Config(format!("unknown key `{key}` in [{section}]"))),
    }
    Ok(())
}
