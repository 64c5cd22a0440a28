use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use lrgan::checkpoint::Checkpoint;
use lrgan::config::TrainConfig;
use lrgan::data::{self, cache, folder, DigitSource, ImageSet, MNIST_ONE, MNIST_TWO};
use lrgan::generator::{Dataset, GenerationValues, ModelConfig};
use lrgan::io::{tensors_hash, write_histograms_png, write_png_grid, RunManifest};
use lrgan::metrics::{self, ClassifierConfig};
use lrgan::nn::Mode;
use lrgan::stn::AffineParams;
use lrgan::training::Trainer;
use lrgan::variants::{VariantKind, VariantSpec};
use lrgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{EvalArgs, GradcheckArgs, PairArgs, SampleArgs, StatsArgs, SynthArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_IO: u8 = 4;

pub const DATA_DIR_ENV: &str = "LRGAN_DATA_DIR";

/// Malformed flag values that clap cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(err) = cause.downcast_ref::<lrgan::Error>() {
            return match err {
                lrgan::Error::Config(_) => EXIT_CONFIG,
                lrgan::Error::Io { .. } | lrgan::Error::Image { .. } | lrgan::Error::Format { .. } => EXIT_IO,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_RUNTIME
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Flag, then config, then environment.
fn data_root(flag: Option<&Path>, config: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag.or(config) {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(lrgan::Error::Config(format!("no dataset root: pass --data-dir, set data.root or {DATA_DIR_ENV}")).into()),
    }
}

fn write_text(manifest: &mut RunManifest, path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| lrgan::Error::io(path, e))?;
    manifest.artifact(path)?;
    Ok(())
}

fn grid(manifest: &mut RunManifest, images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    write_png_grid(images, cols, path)?;
    manifest.artifact(path)?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| lrgan::Error::io(dir, e))?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    let dataset: Dataset = a.dataset.parse()?;
    let layout = match dataset {
        Dataset::MnistOne => MNIST_ONE,
        Dataset::MnistTwo => MNIST_TWO,
        other => return Err(usage(format!("`{other}` is not a synthetic dataset; use mnist-one or mnist-two"))),
    };
    create_out(&a.out)?;
    let record = format!("dataset = {dataset}\nn = {}\nseed = {}\n", a.n, a.seed);
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "synth", &record, a.seed)?;
    let root = data_root(a.data_dir.as_deref(), None)?;
    let src = DigitSource::from_dir(&root)?;
    let samples = match layout.digits {
        1 => data::synth_mnist_one(&src, a.n, a.seed)?,
        _ => data::synth_mnist_two(&src, a.n, a.seed)?,
    };
    let cache_path = a.out.join(format!("{dataset}.lrds"));
    cache::write_cache(&cache_path, &samples)?;
    manifest.artifact(&cache_path)?;
    let set = ImageSet::from_samples(&samples[..samples.len().min(64)])?;
    grid(&mut manifest, &set.images, 8, &a.out.join("preview.png"))?;
    println!("wrote {} samples to {}", samples.len(), cache_path.display());
    Ok(0)
}

fn params_hash(ck: &Checkpoint) -> String {
    tensors_hash(ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))
}

fn save_checkpoint(trainer: &Trainer, path: &Path, manifest: &mut RunManifest) -> lrgan::Result<()> {
    let ck = trainer.checkpoint();
    ck.save(path)?;
    manifest.checkpoint(ck.progress.step, path, &params_hash(&ck))
}

/// Seeded, separate from the training noise so grids never perturb a run.
fn preview_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

fn preview_images(trainer: &Trainer, data: &ImageSet, n: usize) -> lrgan::Result<Tensor<f32>> {
    let vals = if trainer.config.model.variant == VariantKind::Conditional {
        let idx: Vec<usize> = (0..n.min(data.len())).collect();
        trainer.generator.reconstruct_values(&trainer.g_store, &data.batch(&idx), Mode::Sample)?
    } else {
        trainer.generator.sample(&trainer.g_store, n, Mode::Sample, &mut preview_rng(trainer.config.seed))?
    };
    Ok(vals.image().clone())
}

pub fn train(a: TrainArgs, threads: Option<usize>) -> Result<u8> {
    let (config, resume) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (TrainConfig::parse(&ck.config_text)?, Some(ck))
        }
        None => {
            let mut config = match &a.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| lrgan::Error::io(p, e))?;
                    TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
                }
                None => TrainConfig::new(ModelConfig::preset(Dataset::MnistOne)),
            };
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(v) = &a.variant {
                let kind: VariantKind = v.parse()?;
                config.model = VariantSpec::new(kind, config.model).config()?;
            }
            config.validate()?;
            (config, None)
        }
    };
    create_out(&a.out)?;
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "train", &config.to_text(), config.seed)?;
    manifest.append(json!({
        "kind": "environment",
        "device_threads": threads,
        "resume": a.resume.as_ref().map(|p| p.display().to_string()),
    }))?;

    let mut trainer = match &resume {
        Some(ck) => Trainer::from_checkpoint(ck)?,
        None => Trainer::new(config.clone())?,
    };
    let root = data_root(a.data_dir.as_deref(), config.data.root.as_deref())?;
    let data = data::load_training_set(&config, &root)?;
    let nb = trainer.batches_per_epoch(data.len());

    let log_path = a.out.join("train_log.csv");
    let fresh_log = resume.is_none() || !log_path.exists();
    let mut log = if fresh_log { fs::File::create(&log_path) } else { fs::OpenOptions::new().append(true).open(&log_path) }
        .map_err(|e| lrgan::Error::io(&log_path, e))?;
    if fresh_log {
        writeln!(log, "step,epoch,loss_d,loss_g,d_real,d_fake,mse").map_err(|e| lrgan::Error::io(&log_path, e))?;
    }

    let start_step = trainer.progress.step;
    if let Some(max) = a.max_steps {
        if start_step >= max {
            println!("checkpoint is already at step {start_step}");
            return Ok(0);
        }
    }
    let samples_dir = a.out.join("samples");
    let mut epoch_start = Instant::now();
    let run_start = Instant::now();
    trainer.run(&data, |t, r| {
        let mse = r.mse.map_or(String::new(), |m| m.to_string());
        writeln!(log, "{},{},{},{},{},{},{mse}", r.step, r.epoch, r.loss_d, r.loss_g, r.d_real, r.d_fake)
            .map_err(|e| lrgan::Error::io(&log_path, e))?;
        if t.config.checkpoint_every > 0 && r.step % t.config.checkpoint_every == 0 {
            save_checkpoint(t, &a.out.join(format!("ckpt-{}.lrck", r.step)), &mut manifest)?;
        }
        if t.config.sample_every > 0 && r.step % t.config.sample_every == 0 {
            let path = samples_dir.join(format!("step-{:07}.png", r.step));
            write_png_grid(&preview_images(t, &data, 64)?, 8, &path)?;
            manifest.artifact(&path)?;
        }
        if t.progress.batch == nb {
            let secs = epoch_start.elapsed().as_secs_f64();
            manifest.epoch(r.epoch, secs)?;
            println!("epoch {} done in {secs:.1}s: loss_d {:.4} loss_g {:.4}", r.epoch, r.loss_d, r.loss_g);
            epoch_start = Instant::now();
        }
        Ok(match a.max_steps {
            Some(max) if t.progress.step >= max => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    })?;
    log.flush().map_err(|e| lrgan::Error::io(&log_path, e))?;
    manifest.artifact(&log_path)?;

    save_checkpoint(&trainer, &a.out.join("checkpoint.lrck"), &mut manifest)?;
    grid(&mut manifest, &preview_images(&trainer, &data, 64)?, 8, &a.out.join("samples.png"))?;
    manifest.append(json!({ "kind": "done", "step": trainer.progress.step, "seconds": run_start.elapsed().as_secs_f64() }))?;
    println!("trained to step {} (epoch {}); checkpoint in {}", trainer.progress.step, trainer.progress.epoch, a.out.display());
    Ok(0)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("grid `{s}` is not ROWSxCOLS")))?;
    let r: usize = r.trim().parse().map_err(|_| usage(format!("bad grid rows in `{s}`")))?;
    let c: usize = c.trim().parse().map_err(|_| usage(format!("bad grid columns in `{s}`")))?;
    if r == 0 || c == 0 {
        return Err(usage("grid dimensions must be positive"));
    }
    Ok((r, c))
}

/// `m ⊙ f` over black, in display range.
fn carve(f: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = f.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let (fd, md) = (f.data(), m.data());
    let out = Tensor::from_fn(s, |i| {
        let (b, p) = (i / (c * hw), i % hw);
        md[b * hw + p] * (fd[i] + 1.0) - 1.0
    });
    if m.len() != n * hw {
        bail!("mask shape {:?} does not match appearance {:?}", m.shape(), s);
    }
    Ok(out)
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let ck = Checkpoint::load(path)?;
    Ok(Trainer::from_checkpoint(&ck)?)
}

/// Draws `n` samples in batches of the training batch size.
fn sample_many(trainer: &Trainer, n: usize, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<GenerationValues>> {
    let bs = trainer.config.batch_size.max(2);
    let mut out = Vec::new();
    let mut left = n;
    while left > 0 {
        let k = left.min(bs).max(2);
        out.push(trainer.generator.sample(&trainer.g_store, k, mode, rng)?);
        left = left.saturating_sub(k);
    }
    Ok(out)
}

fn concat(parts: &[Tensor<f32>], n: usize) -> Result<Tensor<f32>> {
    let all = Tensor::concat(parts)?;
    Ok(all.select(&(0..n.min(all.shape()[0])).collect::<Vec<_>>()))
}

pub fn sample(a: SampleArgs) -> Result<u8> {
    let (rows, cols) = parse_grid(&a.grid)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "sample", &ck.config_text, a.seed)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let n = rows * cols;
    let mode = if a.running_stats { Mode::Eval } else { Mode::Sample };
    if trainer.config.model.variant == VariantKind::Conditional {
        bail!(lrgan::Error::Config("conditional models reconstruct inputs; use train sample grids instead".into()));
    }
    let vals = trainer.generator.sample(&trainer.g_store, n.max(2), mode, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let take = |t: &Tensor<f32>| t.select(&(0..n).collect::<Vec<_>>());
    grid(&mut manifest, &take(&vals.background), cols, &a.out.join("background.png"))?;
    for (i, l) in vals.layers.iter().enumerate() {
        let t = i + 1;
        grid(&mut manifest, &take(&l.f), cols, &a.out.join(format!("fg{t}_appearance.png")))?;
        grid(&mut manifest, &take(&l.m.map(|v| 2.0 * v - 1.0)), cols, &a.out.join(format!("fg{t}_mask.png")))?;
        grid(&mut manifest, &take(&carve(&l.f, &l.m)?), cols, &a.out.join(format!("fg{t}_carved.png")))?;
        grid(&mut manifest, &take(&carve(&l.f_hat, &l.m_hat)?), cols, &a.out.join(format!("fg{t}_transformed.png")))?;
        grid(&mut manifest, &take(&l.x), cols, &a.out.join(format!("composite{t}.png")))?;
    }
    println!("wrote {} layer kinds for {rows}x{cols} samples to {}", 1 + 5 * vals.layers.len(), a.out.display());
    Ok(0)
}

/// Deterministic `train`/`test` split of a labelled set.
fn split(set: &ImageSet, train_frac: f64, seed: u64) -> (ImageSet, ImageSet) {
    let order = lrgan::training::epoch_order(seed, 0, set.len());
    let cut = (set.len() as f64 * train_frac).round() as usize;
    (set.subset(&order[..cut]), set.subset(&order[cut..]))
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    if a.checkpoint.is_none() && a.class_checkpoints.is_empty() && a.judges.is_none() {
        return Err(usage("eval needs --checkpoint, --class-checkpoint or --judges"));
    }
    let mut class_paths = Vec::new();
    for spec in &a.class_checkpoints {
        let (l, p) = spec.split_once('=').ok_or_else(|| usage(format!("`{spec}` is not LABEL=PATH")))?;
        let l: usize = l.trim().parse().map_err(|_| usage(format!("bad class label in `{spec}`")))?;
        class_paths.push((l, PathBuf::from(p)));
    }
    create_out(&a.out)?;
    let record = format!(
        "checkpoint = {:?}\nclass_checkpoints = {:?}\njudges = {:?}\nn = {}\nsplits = {}\n",
        a.checkpoint, a.class_checkpoints, a.judges, a.n, a.splits
    );
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "eval", &record, a.seed)?;
    let mut results = serde_json::Map::new();
    let clf_config = ClassifierConfig { epochs: a.classifier_epochs, seed: a.seed, ..ClassifierConfig::new(&[64, 128, 256]) };

    if let Some(path) = &a.checkpoint {
        let trainer = load_trainer(path)?;
        let config = &trainer.config;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let vals = sample_many(&trainer, a.n, Mode::Sample, &mut rng)?;
        let images = concat(&vals.iter().map(|v| v.image().clone()).collect::<Vec<_>>(), a.n)?;
        let masks: Vec<f32> = vals.iter().flat_map(|v| v.layers.iter().flat_map(|l| l.m.data().iter().copied())).collect();
        if !masks.is_empty() {
            results.insert("mask_binariness".into(), json!(metrics::mask_binariness(&masks)));
        }
        grid(&mut manifest, &images.select(&(0..images.shape()[0].min(64)).collect::<Vec<_>>()), 8, &a.out.join("eval_samples.png"))?;
        if matches!(config.model.dataset, Dataset::MnistOne | Dataset::MnistTwo) {
            let root = data_root(a.data_dir.as_deref(), config.data.root.as_deref())?;
            let real = data::load_training_set(config, &root)?;
            let (train_set, test_set) = split(&real, 0.8, a.seed);
            let k = real.num_classes();
            let clf = metrics::train_classifier(&train_set, k, &clf_config)?;
            let (mean, std) = metrics::classifier_score(&clf, &images, a.splits)?;
            results.insert("classifier_score".into(), json!({ "mean": mean, "std": std, "classes": k }));
            results.insert("classifier_real_accuracy".into(), json!(metrics::accuracy(&clf.predict(&test_set.images)?, &test_set.labels)));
            let nn = metrics::nn_feature_eval(&trainer.discriminator, &trainer.d_store, &train_set, &test_set)?;
            results.insert("nn_feature_accuracy".into(), json!(nn));
        }
    }

    if !class_paths.is_empty() {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        let mut real_config = None;
        for (l, p) in &class_paths {
            let trainer = load_trainer(p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ *l as u64);
            let vals = sample_many(&trainer, a.n, Mode::Sample, &mut rng)?;
            parts.push(concat(&vals.iter().map(|v| v.image().clone()).collect::<Vec<_>>(), a.n)?);
            labels.extend(std::iter::repeat_n(*l, a.n));
            real_config.get_or_insert(trainer.config.clone());
        }
        let generated = ImageSet::new(Tensor::concat(&parts)?, labels)?;
        let config = real_config.expect("at least one class checkpoint");
        let root = data_root(a.data_dir.as_deref(), config.data.root.as_deref())?;
        let real = data::load_training_set(&config, &root)?;
        let (train_set, validation) = split(&real, 0.8, a.seed);
        let k = real.num_classes().max(generated.num_classes());
        let real_clf = metrics::train_classifier(&train_set, k, &clf_config)?;
        let gen_clf = metrics::train_classifier(&generated, k, &clf_config)?;
        let (acc_real, acc_gen) = metrics::adversarial_accuracy(&real_clf, &gen_clf, &validation)?;
        let div = metrics::adversarial_divergence(&real_clf, &gen_clf, &validation)?;
        results.insert("adversarial_accuracy".into(), json!({ "real": acc_real, "generated": acc_gen }));
        results.insert("adversarial_divergence".into(), json!(div));
    }

    if let Some(path) = &a.judges {
        let text = fs::read_to_string(path).map_err(|e| lrgan::Error::io(path, e))?;
        let rows = metrics::aggregate_csv(&text)?;
        let mut csv = String::from("image_id,label,level\n");
        let mut levels = std::collections::BTreeMap::<usize, usize>::new();
        for (id, q) in &rows {
            let label = q.label.map_or("NR".to_string(), |l| l.to_string());
            let _ = writeln!(csv, "{id},{label},{}", q.level);
            *levels.entry(q.level).or_default() += 1;
        }
        write_text(&mut manifest, &a.out.join("quality.csv"), &csv)?;
        let hist: serde_json::Map<_, _> = levels.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        results.insert("quality_levels".into(), serde_json::Value::Object(hist));
    }

    let value = serde_json::Value::Object(results);
    manifest.metrics(value.clone())?;
    let text = serde_json::to_string_pretty(&value).context("serializing metrics")?;
    write_text(&mut manifest, &a.out.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let reports = lrgan::gradcheck::run_suite(a.seeds, a.tolerance)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<32} max rel error {:.3e}", r.name, r.max_rel_error());
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed (tolerance {:e})", reports.len(), a.tolerance);
    Ok(if failed == 0 { 0 } else { EXIT_RUNTIME })
}

fn load_image_set(path: &Path, size: usize) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "lrds") {
        let samples = cache::read_cache(path)?;
        Ok(ImageSet::from_samples(&samples)?.images)
    } else {
        Ok(folder::load_png_folder(path, size)?)
    }
}

pub fn pair(a: PairArgs) -> Result<u8> {
    create_out(&a.out)?;
    let record = format!("a = {}\nb = {}\nsize = {}\n", a.a.display(), a.b.display(), a.size);
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "pair", &record, 0)?;
    let set_a = load_image_set(&a.a, a.size)?;
    let set_b = load_image_set(&a.b, a.size)?;
    let n = set_a.shape()[0].min(set_b.shape()[0]);
    if set_a.shape()[0] != set_b.shape()[0] {
        eprintln!("note: pairing the first {n} images of each set");
    }
    let idx: Vec<usize> = (0..n).collect();
    let (set_a, set_b) = (set_a.select(&idx), set_b.select(&idx));
    let cost = metrics::hungarian::l2_cost_matrix(&set_a, &set_b)?;
    let result = metrics::hungarian(&cost, n)?;
    let mut csv = String::from("a_index,b_index,distance\n");
    for (i, &j) in result.assignment.iter().enumerate() {
        let _ = writeln!(csv, "{i},{j},{}", cost[i * n + j]);
    }
    write_text(&mut manifest, &a.out.join("pairs.csv"), &csv)?;
    let shown = n.min(32);
    let mut tiles = Vec::with_capacity(2 * shown);
    for i in 0..shown {
        tiles.push(set_a.select(&[i]));
        tiles.push(set_b.select(&[result.assignment[i]]));
    }
    if shown > 0 {
        grid(&mut manifest, &Tensor::concat(&tiles)?, 8, &a.out.join("pairs.png"))?;
    }
    manifest.metrics(json!({ "pairs": n, "total_distance": result.total }))?;
    println!("paired {n} images, total distance {:.4}", result.total);
    Ok(0)
}

pub fn stats(a: StatsArgs) -> Result<u8> {
    if a.bins == 0 || a.n == 0 {
        return Err(usage("--n and --bins must be positive"));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::open(&a.out.join("manifest.jsonl"), "stats", &ck.config_text, a.seed)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    if trainer.config.model.variant == VariantKind::Conditional {
        bail!(lrgan::Error::Config("stats samples from noise; conditional models are not supported".into()));
    }
    let vals = sample_many(&trainer, a.n, Mode::Sample, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let mut report = String::new();
    let per_layer = vals.first().map_or(0, |v| v.layers.len());
    for t in 0..per_layer {
        let masks: Vec<f32> = vals.iter().flat_map(|v| v.layers[t].m.data().iter().copied()).collect();
        let _ = writeln!(report, "mask_binariness[fg{}] = {:.6}", t + 1, metrics::mask_binariness(&masks));
    }
    let poses: Vec<AffineParams<f32>> = vals
        .iter()
        .flat_map(|v| v.layers.iter().filter_map(|l| l.a.clone()))
        .map(AffineParams::new)
        .collect::<lrgan::Result<_>>()?;
    if poses.is_empty() {
        let _ = writeln!(report, "no pose parameters (model has no transformer)");
    } else {
        let hists = metrics::transform_histograms(&poses, a.bins)?;
        for h in &hists {
            let _ = writeln!(report, "{} range = [{:.6}, {:.6}] spread {:.6}", h.name, h.min, h.max, h.range());
        }
        write_text(&mut manifest, &a.out.join("transforms.csv"), &metrics::histograms_csv(&hists))?;
        let png = a.out.join("transforms.png");
        write_histograms_png(&hists, &png)?;
        manifest.artifact(&png)?;
    }
    write_text(&mut manifest, &a.out.join("stats.txt"), &report)?;
    print!("{report}");
    Ok(0)
}
