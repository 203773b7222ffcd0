//! `deconvseg` command-line tool.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::UsageError;

#[derive(Parser)]
#[command(name = "deconvseg", version, about = "Proposal-based semantic segmentation with a deconvolution network")]
struct Cli {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset with grid proposals.
    Synth(SynthArgs),
    /// Train the network, or the whole-image baseline.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Write one layer's strongest activation channel as an image.
    DumpActivations(DumpArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images; defaults to the configured count.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest; overrides the configured path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset; defaults to a held-out tail of the training set.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Proposal records for stage 2.
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: StageArg,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the whole-image baseline instead.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the per-stage iteration budget.
    #[arg(long)]
    pub iters: Option<u64>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of PNG images.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[arg(long, value_parser = ["max", "sum"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Baseline checkpoint averaged with the proposal prediction.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted label PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label PNGs.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub layer: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DECONVSEG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("DECONVSEG_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(UsageError("DECONVSEG_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let cfg = config::RunConfig::load(cli.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    match cli.command {
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Predict(a) => commands::predict(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::DumpActivations(a) => commands::dump_activations(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
