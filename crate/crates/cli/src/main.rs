//! `mulpro`: dataset generation, training, evaluation, gradient checks,
//! ablation sweeps and prototype inspection.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mulpro_core::Error;

#[derive(Parser)]
#[command(name = "mulpro", version, about = "Multi-prototype point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, metrics and a final report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every cell of an ablation grid.
    Ablate(AblateArgs),
    /// Dump per-point activations and prototype geometry.
    Inspect(InspectArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct SpecSource {
    /// Generator spec file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Use the built-in table world.
    #[arg(long)]
    pub default: bool,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Training labels: full, one-per-part or a fraction such as 0.1.
    #[arg(long, default_value = "full")]
    pub labels: String,
    /// Seed of the label draw (defaults to --seed).
    #[arg(long)]
    pub label_seed: Option<u64>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub points_per_sample: Option<usize>,
}

/// Config file plus per-key overrides, applied in that order.
#[derive(Args, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long, alias = "learning-rate")]
    pub lr: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Prototypes per class.
    #[arg(long, alias = "num-prototypes")]
    pub m: Option<String>,
    #[arg(long)]
    pub lambda_ce: Option<String>,
    #[arg(long)]
    pub lambda_avg: Option<String>,
    #[arg(long)]
    pub lambda_pd: Option<String>,
    #[arg(long)]
    pub lambda_bds: Option<String>,
    #[arg(long)]
    pub sigma: Option<String>,
    /// Averaging threshold, or `auto`.
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    /// alg1, frobenius or cosine.
    #[arg(long)]
    pub avg_variant: Option<String>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset (defaults to the training data).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// small or tiny.
    #[arg(long, default_value = "small")]
    pub sizes: String,
    /// Directory for the report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test hook: perturb the analytic gradient of one component.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma list of cells and presets (tab4, variants, msweep, all).
    #[arg(long, default_value = "tab4")]
    pub grid: String,
    /// Seeds per cell, counting up from the config seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    CheckFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = mulpro_core::trainer::init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
