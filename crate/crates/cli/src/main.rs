//! Command-line surface over the splatting engine: synthesize test scenes,
//! train, render, evaluate and visualize primitive structure.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
//! `SCG_THREADS` bounds the rayon worker count.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "scgs", version, about = "Gaussian splatting with ray-bound structure priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory (cameras, images, depths,
    /// matches).
    Synth(SynthArgs),
    /// Train a model over a scene directory.
    Train(TrainArgs),
    /// Render color and depth images from a checkpoint.
    Render(RenderArgs),
    /// Evaluate a checkpoint against held-out views.
    Eval(EvalArgs),
    /// Render the nearest-primitive distance map (all opacities forced to 1).
    VizDepth(VizDepthArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of training views.
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Number of held-out test views.
    #[arg(long, default_value_t = 1)]
    test_views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Matches generated per (unordered) training view pair.
    #[arg(long, default_value_t = 300)]
    pairs: usize,
    /// Gaussian pixel noise on match endpoints.
    #[arg(long, default_value_t = 0.0)]
    noise_px: f64,
    /// Fraction of matches replaced by mismatches.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a checkered box in front of the planes.
    #[arg(long, default_value_t = false)]
    with_box: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Scene directory (from `synth` or hand-assembled).
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for the checkpoint, loss log and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Start from a config snapshot; flags below still override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    cache_window: Option<usize>,
    /// Ray-distance learning rate endpoints as `start:end`.
    #[arg(long)]
    z_lr: Option<String>,
    #[arg(long)]
    photo_weight: Option<f64>,
    #[arg(long)]
    sh_degree: Option<u32>,
    #[arg(long)]
    densify_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ray-distance init: `loguniform` or `triangulated`.
    #[arg(long)]
    z_init: Option<String>,
    /// Cache a whole-model snapshot instead of per-primitive minima.
    #[arg(long, default_value_t = false)]
    snapshot_cache: bool,
    /// Feed alpha-normalized depth to the geometry loss.
    #[arg(long, default_value_t = false)]
    normalize_depth_rg: bool,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory providing the cameras.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View ids to render (default: all).
    #[arg(long, value_delimiter = ',')]
    views: Vec<u32>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View ids to evaluate (default: the scene's held-out test views).
    #[arg(long, value_delimiter = ',')]
    views: Vec<u32>,
}

#[derive(clap::Args)]
struct VizDepthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View ids to visualize (default: all).
    #[arg(long, value_delimiter = ',')]
    views: Vec<u32>,
    /// Keep the usual 0.99 alpha clamp instead of exact saturation.
    #[arg(long, default_value_t = false)]
    clamp: bool,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SCG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Render(args) => commands::render(args),
        Command::Eval(args) => commands::eval(args),
        Command::VizDepth(args) => commands::viz_depth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(err.exit_code())
        }
    }
}

/// Errors carrying their process exit code: 3 for data problems, 4 for
/// numerical failures.
#[derive(Debug)]
pub enum AppError {
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Data(_) => 3,
            AppError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Data(e) | AppError::Numerical(e) => write!(f, "{e:#}"),
        }
    }
}
