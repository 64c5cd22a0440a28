//! End-to-end runs of the `lrgan` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[model]
z_dim = 6
hidden = 6
bg_widths = 8,6,4
fg_widths = 8,6,4
d_widths = 4,6,8
[train]
batch_size = 4
epochs = 1
checkpoint_every = 3
[data]
num_samples = 24
";

fn digits() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn lrgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrgan")).args(args).env_remove("LRGAN_DATA_DIR").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let config = dir.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let out = dir.join(name);
    let data = digits();
    let mut args = vec!["train", "--config", s(&config), "--out", s(&out), "--data-dir", s(&data)];
    args.extend_from_slice(extra);
    let res = lrgan(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&lrgan(&["bogus"])), 1);
    assert_eq!(code(&lrgan(&["sample"])), 1);
    assert_eq!(code(&lrgan(&["eval"])), 1);
    assert_eq!(code(&lrgan(&["--help"])), 0);
}

#[test]
fn bad_configuration_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nbatch_size = 1\n").unwrap();
    let out = lrgan(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    let out = lrgan(&["train", "--variant", "sideways", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = lrgan(&["sample", "--checkpoint", s(&dir.path().join("absent.lrck")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 4);
}

#[test]
fn gradcheck_passes() {
    let out = lrgan(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn sample_writes_one_grid_per_layer_kind() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", &[]);
    for f in ["checkpoint.lrck", "ckpt-3.lrck", "ckpt-6.lrck", "samples.png", "train_log.csv", "manifest.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let out_dir = dir.path().join("samples");
    let res = lrgan(&["sample", "--checkpoint", s(&run.join("checkpoint.lrck")), "--grid", "8x8", "--out", s(&out_dir)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    // 8 tiles of 32 pixels with 2-pixel separators
    let side = 8 * 32 + 7 * 2;
    for kind in ["background", "fg1_appearance", "fg1_mask", "fg1_carved", "fg1_transformed", "composite1"] {
        let img = image::open(out_dir.join(format!("{kind}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (side, side), "{kind}");
    }
    let manifest = std::fs::read_to_string(out_dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains("\"artifact\"")).count(), 6);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = train_tiny(dir.path(), "straight", &[]);
    let split = train_tiny(dir.path(), "split", &["--max-steps", "3"]);
    let res = lrgan(&["train", "--resume", s(&split.join("checkpoint.lrck")), "--out", s(&split), "--data-dir", s(&digits())]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let a = std::fs::read(straight.join("checkpoint.lrck")).unwrap();
    let b = std::fs::read(split.join("checkpoint.lrck")).unwrap();
    assert!(a == b, "checkpoints differ after resume");
    assert_eq!(
        std::fs::read_to_string(straight.join("train_log.csv")).unwrap(),
        std::fs::read_to_string(split.join("train_log.csv")).unwrap()
    );
}

#[test]
fn synth_stats_and_pair_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    assert_eq!(code(&lrgan(&["synth", "--n", "12", "--data-dir", s(&digits()), "--out", s(&synth)])), 0);
    let cache = synth.join("mnist-one.lrds");
    assert!(synth.join("preview.png").exists());

    let pair = dir.path().join("pair");
    assert_eq!(code(&lrgan(&["pair", "--a", s(&cache), "--b", s(&cache), "--out", s(&pair)])), 0);
    let csv = std::fs::read_to_string(pair.join("pairs.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(*row, format!("{i},{i},0"));
    }

    let run = train_tiny(dir.path(), "run", &["--max-steps", "2"]);
    let stats = dir.path().join("stats");
    let res = lrgan(&["stats", "--checkpoint", s(&run.join("checkpoint.lrck")), "--n", "16", "--out", s(&stats)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(stats.join("transforms.csv")).unwrap();
    for name in ["s_x", "r_x", "t_x", "r_y", "s_y", "t_y"] {
        assert!(csv.contains(name), "{name}");
    }
    assert!(stats.join("transforms.png").exists());
}

#[test]
fn eval_writes_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", &["--max-steps", "1"]);
    let judges = dir.path().join("judges.csv");
    std::fs::write(&judges, "image_id,judge_id,label\na,1,1\na,2,1\nb,1,0\nb,2,1\n").unwrap();
    let out = dir.path().join("eval");
    let res = lrgan(&[
        "eval", "--checkpoint", s(&run.join("checkpoint.lrck")), "--judges", s(&judges), "--n", "8", "--splits", "2",
        "--classifier-epochs", "1", "--data-dir", s(&digits()), "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["classifier_score", "classifier_real_accuracy", "nn_feature_accuracy", "mask_binariness"] {
        assert!(m.get(key).is_some(), "{key}");
    }
    let score = m["classifier_score"]["mean"].as_f64().unwrap();
    assert!((1.0..=10.0 + 1e-9).contains(&score));
    assert!(out.join("quality.csv").exists());
}
