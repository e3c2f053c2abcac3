use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Recurrent video segmentation: data, training, evaluation and cost reports.
#[derive(Debug, Parser)]
#[command(name = "vidseg", version, about)]
struct Cli {
    /// Base directory for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = "VIDSEG_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic moving-shapes dataset.
    GenerateData(GenerateArgs),
    /// Train one or more repetitions of a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally under a disturbance.
    Eval(EvalArgs),
    /// Write a disturbed copy of a dataset.
    Perturb(PerturbArgs),
    /// Analytic FLOPs of the three recurrent unit designs.
    Flops(FlopsArgs),
    /// Wall-clock timing of single unit forward steps.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// JSON dataset configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (default: <out-dir>/data).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_speed: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default: <out-dir>/train).
    #[arg(long)]
    out: Option<PathBuf>,
    /// base, v2, v5 or v6.
    #[arg(long = "net-version")]
    net_version: Option<String>,
    /// standard, fast or faster.
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable every training augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Checkpoint whose backbone weights initialise the network.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Print the loss every this many iterations (0 disables).
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct DisturbanceArgs {
    /// Rain preset: light, moderate or heavy.
    #[arg(long)]
    rain: Option<String>,
    /// Gaussian noise with this standard deviation.
    #[arg(long)]
    gaussian: Option<f32>,
    /// Salt-and-pepper noise with this corruption probability.
    #[arg(long)]
    salt_pepper: Option<f64>,
    /// One white polygon covering at most this fraction of the image.
    #[arg(long)]
    polygon: Option<f64>,
    /// Multiply brightness by this factor.
    #[arg(long)]
    brightness: Option<f32>,
    /// Frames to disturb: last, all, or subset:<p>.
    #[arg(long, default_value = "last")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    disturb_seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[command(flatten)]
    disturbance: DisturbanceArgs,
    /// Metrics file (default: <out-dir>/metrics.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    disturbance: DisturbanceArgs,
    /// Root of the disturbed copy (default: <out-dir>/perturbed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long = "I", default_value_t = 128)]
    i: u64,
    #[arg(long = "O", default_value_t = 128)]
    o: u64,
    /// Square kernel extent.
    #[arg(long = "K", default_value_t = 3)]
    k: u64,
    /// Square spatial extent; overridden by --Dx / --Dy.
    #[arg(long = "D", default_value_t = 1)]
    d: u64,
    #[arg(long = "Dx")]
    dx: Option<u64>,
    #[arg(long = "Dy")]
    dy: Option<u64>,
    /// Also report the recurrent cost of a network configured by this JSON file.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated unit designs.
    #[arg(long, default_value = "standard,fast,faster")]
    designs: String,
    #[arg(long = "I", default_value_t = 128)]
    i: usize,
    #[arg(long = "O", default_value_t = 128)]
    o: usize,
    #[arg(long = "K", default_value_t = 3)]
    k: usize,
    #[arg(long = "Kx")]
    kx: Option<usize>,
    #[arg(long = "Ky")]
    ky: Option<usize>,
    #[arg(long = "D", default_value_t = 64)]
    d: usize,
    #[arg(long = "Dx")]
    dx: Option<usize>,
    #[arg(long = "Dy")]
    dy: Option<usize>,
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Report file (default: <out-dir>/bench.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate(&cli.out_dir, a),
        Command::Train(a) => commands::train(&cli.out_dir, a),
        Command::Eval(a) => commands::eval(&cli.out_dir, a),
        Command::Perturb(a) => commands::perturb(&cli.out_dir, a),
        Command::Flops(a) => commands::flops(a),
        Command::Bench(a) => commands::bench(&cli.out_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
