//! `lrgan` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lrgan", version, about = "Layered recursive GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for numeric kernels (recorded; kernels run on one thread).
    #[arg(long, global = true, value_name = "N")]
    device_threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic digit dataset and its cache file.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Write sample grids of every intermediate image kind.
    Sample(SampleArgs),
    /// Compute evaluation metrics.
    Eval(EvalArgs),
    /// Run the 64-bit gradient suite.
    Gradcheck(GradcheckArgs),
    /// Minimum-distance pairing of two image sets.
    Pair(PairArgs),
    /// Pose histograms and mask binariness of generated samples.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `mnist-one` or `mnist-two`.
    #[arg(long, default_value = "mnist-one")]
    dataset: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding the IDX digit files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "out/synth")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
    /// Continue from a checkpoint; the configuration comes from the checkpoint.
    #[arg(long, conflicts_with_all = ["config", "seed", "variant"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Stop once this many optimizer steps have been taken in total.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grid layout as ROWSxCOLS.
    #[arg(long, default_value = "8x8")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/samples")]
    out: PathBuf,
    /// Use running batch-norm statistics instead of batch statistics.
    #[arg(long)]
    running_stats: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-class generators as LABEL=CHECKPOINT, for adversarial accuracy.
    #[arg(long = "class-checkpoint", value_name = "LABEL=PATH")]
    class_checkpoints: Vec<String>,
    /// Judge labels CSV (`image_id,judge_id,label`).
    #[arg(long)]
    judges: Option<PathBuf>,
    /// Generated samples per score or per class.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 10)]
    classifier_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "out/eval")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = lrgan::gradcheck::SUITE_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct PairArgs {
    /// PNG folder or `.lrds` cache.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Resize PNG inputs to this size.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value = "out/pair")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/stats")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(commands::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let threads = cli.device_threads;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, threads),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Pair(a) => commands::pair(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg.push_str(if msg.is_empty() { "" } else { ": " });
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
