//! `hrank`: estimate ranks, plan, prune, report and fine-tune from the shell.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod inputs;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "hrank", version, about = "Rank-guided structured filter pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a preset network and save it as a model file.
    Init(InitArgs),
    /// Accumulate per-filter feature-map rank sums over a sample of images.
    EstimateRanks(EstimateArgs),
    /// Summarize a rank-statistics file per layer, or dump it as CSV.
    RankReport(RankReportArgs),
    /// Turn rank statistics and prune rates into a keep/prune plan.
    Plan(PlanArgs),
    /// Apply a plan to a model.
    Prune(PruneArgs),
    /// Compare FLOPs and parameters (and optionally accuracy) of two models.
    Report(ReportArgs),
    /// Train a model with SGD, optionally freezing its highest-rank filters.
    Finetune(FinetuneArgs),
    /// Re-run the command recorded in a manifest and check its outputs are byte-identical.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
#[group(id = "model_source", required = true, multiple = false)]
pub struct ModelArgs {
    /// Model file written by `init`, `prune` or `finetune`.
    #[arg(long, group = "model_source")]
    pub model: Option<PathBuf>,
    /// Build this preset in memory instead (initialized with --seed).
    #[arg(long, group = "model_source")]
    pub preset: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PresetShape {
    /// Channel width multiplier for presets.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Classifier outputs for presets.
    #[arg(long, default_value_t = 10)]
    pub num_classes: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory with the CIFAR-10 binary batch files.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset_dir: Option<PathBuf>,
    /// CIFAR-10 split to read.
    #[arg(long, default_value = "train", requires = "dataset_dir")]
    pub split: String,
    /// Synthetic images instead of CIFAR-10, e.g.
    /// `classes=10,n=1000,dims=3x32x32,seed=0,margin=1,noise=1,blobs=3,jitter=0`.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub synthetic: Option<String>,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub preset: String,
    #[command(flatten)]
    pub shape: PresetShape,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub shape: PresetShape,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of sampled images.
    #[arg(long, default_value_t = 500)]
    pub g: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where feature maps are read: post_block (after BN and ReLU) or post_conv.
    #[arg(long, default_value = "post_block")]
    pub capture_point: String,
    /// Images per forward pass.
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    /// Worker threads for the rank computations (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RankReportArgs {
    #[arg(long)]
    pub stats: PathBuf,
    /// One row per filter as CSV instead of the per-layer summary.
    #[arg(long)]
    pub csv: bool,
    /// Also write the report here (and a manifest next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub stats: PathBuf,
    /// A uniform rate in [0, 1) or a JSON rate file.
    #[arg(long)]
    pub rates: String,
    /// Selection rule: hrank, edge, random or reverse.
    #[arg(long, default_value = "hrank")]
    pub variant: String,
    /// Seed for the random variant.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub shape: PresetShape,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub plan: PathBuf,
    /// Statistics the plan was built from; checked against the plan and model when given.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub shape: PresetShape,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pruned model to compare against the baseline; defaults to the baseline itself.
    #[arg(long)]
    pub pruned: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluate top-1 on at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Add a per-layer FLOPs/params breakdown.
    #[arg(long)]
    pub breakdown: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub shape: PresetShape,
    #[command(flatten)]
    pub data: DataArgs,
    /// Plan that produced the model; needed with --freeze-fraction.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Statistics behind --plan; needed with --freeze-fraction.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Fraction of each layer's kept filters to freeze, highest rank first.
    #[arg(long, default_value_t = 0.0)]
    pub freeze_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Epochs at whose start the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    pub lr_drops: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Momentum buffers from an earlier run to continue from.
    #[arg(long)]
    pub optimizer: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Checkpoint path; optimizer state and trajectory are written alongside.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the primary output here instead of the recorded path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A problem with how the tool was invoked; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (without the program name) and runs the command.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match Cli::command().try_get_matches_from(std::iter::once(OsString::from("hrank")).chain(argv.clone()))
    {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| UsageError(e.to_string()))?;
    commands::dispatch(cli.command, &matches, &argv)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || c.downcast_ref::<hrank::Error>().is_some_and(hrank::Error::is_usage)
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().skip(1)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
