//! `music`: generate data, train, probe, analyze and gradient-check
//! multi-segment softmax codes.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 numerical
//! failure during training, 3 failed verification.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use music_core::data;
use music_core::diagnostics::ProbeConfig;
use music_core::trainer::LossCheckConfig;

#[derive(Parser, Debug)]
#[command(name = "music", version, about = "Self-supervised multi-segment softmax coding on synthetic clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded Gaussian-cluster dataset file.
    GenData(GenDataArgs),
    /// Train encoder and projector; write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Fit a linear classifier on frozen encoder outputs.
    Probe(ProbeArgs),
    /// Compute code diagnostics (balance, mutual information, covariance).
    Analyze(AnalyzeArgs),
    /// Compare tape gradients of the full loss with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the resolved run configuration as TOML.
    ShowConfig(ShowConfigArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = data::DEFAULT_CLASSES)]
    classes: usize,
    /// Coordinates carrying the class mean.
    #[arg(long, default_value_t = data::DEFAULT_DIM_SIGNAL)]
    dim_signal: usize,
    /// Pure-noise coordinates appended after the signal.
    #[arg(long, default_value_t = data::DEFAULT_DIM_NUISANCE)]
    dim_nuisance: usize,
    #[arg(long, default_value_t = data::DEFAULT_PER_CLASS)]
    per_class: usize,
    /// Scale of the class means.
    #[arg(long, default_value_t = data::DEFAULT_SEPARATION)]
    separation: f64,
    /// Within-class standard deviation of the signal coordinates.
    #[arg(long, default_value_t = data::DEFAULT_NOISE_STD)]
    noise: f64,
    #[arg(long, default_value_t = data::DEFAULT_DATA_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written after the last epoch.
    #[arg(long = "out", alias = "out-ckpt")]
    out: PathBuf,
    /// One JSON record per epoch.
    #[arg(long)]
    metrics: PathBuf,
    /// Override `epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `lambda` from the config.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Record per-epoch wall time in `wall_ms` (otherwise null, keeping the
    /// metrics file reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report, one line.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().split_seed)]
    split_seed: u64,
    /// Full-batch gradient-descent epochs.
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, required_unless_present = "ideal")]
    ckpt: Option<PathBuf>,
    #[arg(long, required_unless_present = "ideal")]
    data: Option<PathBuf>,
    /// JSON report, one line.
    #[arg(long)]
    report: PathBuf,
    /// Samples in the analyzed batch.
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Selects the batch and its augmented second view.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Analyze the constructed balanced one-hot code instead of a model.
    #[arg(long, conflicts_with_all = ["ckpt", "data"])]
    ideal: bool,
    /// Segments of the constructed code (with --ideal).
    #[arg(long, default_value_t = 2, requires = "ideal")]
    segments: usize,
    /// Units per segment of the constructed code (with --ideal).
    #[arg(long, default_value_t = 2, requires = "ideal")]
    segment_dim: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = LossCheckConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = LossCheckConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = LossCheckConfig::default().num_segments)]
    segments: usize,
    #[arg(long, default_value_t = LossCheckConfig::default().segment_dim)]
    segment_dim: usize,
    #[arg(long, default_value_t = LossCheckConfig::default().input_dim)]
    input_dim: usize,
    #[arg(long, default_value_t = LossCheckConfig::default().hidden_dim)]
    hidden: usize,
    #[arg(long, default_value_t = LossCheckConfig::default().lambda)]
    lambda: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = LossCheckConfig::default().step)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = LossCheckConfig::default().tolerance)]
    tolerance: f64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct ShowConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Probe(a) => commands::probe(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ShowConfig(a) => commands::show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
