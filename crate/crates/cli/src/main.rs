mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddsd::features::ProviderTag;
use ddsd::prefix::Modalities;
use ddsd::training::LossMask;

#[derive(Debug, Parser)]
#[command(name = "ddsd", version, about = "Device-directed speech detection with a frozen toy LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark
    GenData(GenDataArgs),
    /// Pretrain and freeze the base language model
    Pretrain(PretrainArgs),
    /// Train adapters and mapping networks for one configuration
    Train(TrainArgs),
    /// Score the eval split and compute the EER and DET curve
    Eval(EvalArgs),
    /// Run a list of ablation rows and write the results table
    Sweep(SweepArgs),
    /// Render stored sweep records as a table
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Falls back to the DDSD_SEED environment variable
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    eval: Option<usize>,
    #[arg(long)]
    provider: Option<ProviderTag>,
    /// Store frames in the records instead of regenerable references
    #[arg(long)]
    inline_frames: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus size in sentences
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base checkpoint, or the directory pretrain wrote
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of t (text), a (audio), b (decoder signals)
    #[arg(long)]
    modalities: Option<Modalities>,
    /// Train the mapping networks only
    #[arg(long)]
    no_lora: bool,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    provider: Option<ProviderTag>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    loss_mask: Option<LossMaskArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum LossMaskArg {
    DecisionOnly,
    FullSequence,
}

impl From<LossMaskArg> for LossMask {
    fn from(a: LossMaskArg) -> Self {
        match a {
            LossMaskArg::DecisionOnly => LossMask::DecisionOnly,
            LossMaskArg::FullSequence => LossMask::FullSequence,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Detector checkpoint, or the directory train wrote
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Defaults to the provider recorded at training time
    #[arg(long)]
    provider: Option<ProviderTag>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// runs.jsonl, or the directory sweep wrote
    #[arg(long)]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
