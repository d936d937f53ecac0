//! Command-line surface: subcommands, their flags, and shared value enums.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "ldct",
    version,
    about = "Cross-domain low-dose CT denoising: data synthesis, training, evaluation, ablations, reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a two-domain phantom dataset on disk.
    GenData(GenDataArgs),
    /// Train a model (or resume from a checkpoint).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one domain/split and write metric reports.
    Eval(EvalArgs),
    /// Run the five-setting component ablation lattice.
    Ablate(AblateArgs),
    /// Emit diagnostic CSVs and plots from training logs.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Small setup for fast end-to-end runs.
    Smoke,
    /// Full-scale published defaults.
    Paper,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory for slices and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset config JSON (defaults to the smoke dataset).
    #[arg(long, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Slice edge length override.
    #[arg(long)]
    pub slice_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Root under which a timestamped run directory is created.
    #[arg(long, default_value = "runs", conflicts_with = "run_dir")]
    pub out: PathBuf,
    /// Label prefix for the timestamped run directory.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Exact run directory (bypasses timestamping).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Experiment config JSON.
    #[arg(long, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Resume training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total epoch budget (with --resume: the new total).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Monte-Carlo samples per training step.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Monte-Carlo samples at evaluation time.
    #[arg(long)]
    pub eval_mc_samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub patches_per_slice: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the latent covariance-alignment loss.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Weight of the adversarial residual-alignment loss.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// KL weight override (default: one over the training patch count).
    #[arg(long)]
    pub kl_scale: Option<f64>,
    /// Freeze posterior widths at zero (deterministic network).
    #[arg(long)]
    pub freeze_sigma: bool,
    #[arg(long)]
    pub moped_pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub disc_base_channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metric reports.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DomainArg::Target)]
    pub domain: DomainArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Monte-Carlo samples override (default: checkpoint config).
    #[arg(long)]
    pub mc: Option<usize>,
    /// Evaluation seed override (default: checkpoint config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output root; one subdirectory per ablation setting.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON used as the lattice base.
    #[arg(long, conflicts_with = "profile")]
    pub config: Option<PathBuf>,
    /// Named preset (default: smoke).
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories containing training logs (repeatable).
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    /// Output directory for CSVs and plots.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; enables residual-PDF diagnostics.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint for residual PDFs (default: best of the first run).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}
