//! `onhw`: data preparation, training and evaluation for IMU-pen handwriting
//! recognition.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{AlphabetSource, Context, ExperimentConfig};

#[derive(Parser)]
#[command(name = "onhw", version, about = "IMU-pen handwriting recognition toolkit")]
struct Cli {
    /// Seed for every random choice; required by split, augment, train and gradcheck.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment config. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a recording and its labels into a dataset file.
    Ingest(IngestArgs),
    /// Write a k-fold plan (writer-dependent or writer-independent).
    Split(SplitArgs),
    /// Write an augmented copy of a dataset and print its hash.
    Augment(AugmentArgs),
    /// Split equations into single characters using the force channel.
    Segment(SegmentArgs),
    /// Train on one fold, writing a checkpoint and a JSON-lines history.
    Train(TrainArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Predict labels with a trained checkpoint.
    Decode(DecodeArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Data file: header line plus one row per timestep.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labels file: one JSON window per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub alphabet: Option<AlphabetSource>,
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// WD or WI.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated subset of scale,shift,jitter,mag_warp,time_warp.
    #[arg(long)]
    pub methods: Option<String>,
    /// Augmented copies per sample.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
}

#[derive(Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Force threshold in newtons.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Minimum stroke length in timesteps.
    #[arg(long)]
    pub min_len: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// ctc, or a character loss: cce, focal, lsr, boot_soft, boot_hard, gce, sce, joint_opt.
    #[arg(long)]
    pub loss: Option<String>,
    /// Total epochs; on resume this may extend the original schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint; history lines are appended.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Reference labels, one per line.
    #[arg(long, requires = "hypothesis")]
    pub reference: Option<PathBuf>,
    /// Hypothesis labels, one per line.
    #[arg(long, requires = "reference")]
    pub hypothesis: Option<PathBuf>,
    /// Decode with this checkpoint instead of reading hypotheses.
    #[arg(long, conflicts_with_all = ["reference", "hypothesis"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Restrict to the validation part of a fold.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Bins of the positional error histograms.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Beam width for sequence models; greedy when absent.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random draws per check.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Context::new(cfg, cli.seed, cli.out);
    match cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a)?,
        Command::Split(a) => commands::split(&ctx, a)?,
        Command::Augment(a) => commands::augment_cmd(&ctx, a)?,
        Command::Segment(a) => commands::segment(&ctx, a)?,
        Command::Train(a) => commands::train(&ctx, a)?,
        Command::Evaluate(a) => commands::evaluate(&ctx, a)?,
        Command::Decode(a) => commands::decode(&ctx, a)?,
        Command::Gradcheck(a) => {
            if !commands::gradcheck(&ctx, a)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
