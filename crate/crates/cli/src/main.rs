mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nvk_core::data::synth::CorpusKind;
use nvk_core::eval::Voting;
use nvk_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "nvk",
    version,
    about = "Self-supervised ViT / Vim training and evaluation on street imagery"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-distillation pretraining (or continued training from --resume / --init).
    Pretrain(PretrainArgs),
    /// Train backbone and linear head on a labeled task.
    Finetune(TaskArgs),
    /// Train a linear head on frozen backbone features.
    Probe(TaskArgs),
    /// Score a trained classifier on the test split.
    Evaluate(EvaluateArgs),
    /// Class-token attention overlay for one image.
    Visualize(VisualizeArgs),
    /// Stratified train/val/test split manifest.
    Split(SplitArgs),
    /// Generate a deterministic synthetic corpus.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Image list (`path` CSV or label manifest); overrides `data.images`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Resume a run from one of its checkpoints.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Start from pretrained backbone weights with a fresh head and schedule.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// Pretrained checkpoint; random initialization when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub voting: Option<Voting>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Classifier written by finetune or probe.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub voting: Option<Voting>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Transformer layer (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Fraction of patches kept in the mask.
    #[arg(long, default_value_t = nvk_core::viz::DEFAULT_Q)]
    pub q: f64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Label manifest; without it the benchmark class totals of --task are used.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    /// Train,val,test proportions, e.g. 75,10,15.
    #[arg(long, default_value = "75,10,15")]
    pub ratios: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Side length of separable and noise images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_rate: f64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
