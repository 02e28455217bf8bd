//! `imlw`: collect, serve, train, fine-tune, sweep, evaluate, deploy-simulate,
//! merge and report.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation failure, 3 numeric
//! failure (divergence or non-finite values).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use imlw_core::deploy::DeployError;
use imlw_core::diffusion::DiffusionError;
use imlw_core::evalr::EvalError;
use imlw_core::netcore::{EncoderVariant, NoiseNetVariant};
use imlw_core::trainer::TrainError;

/// Misuse of the command line or config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "imlw", version, about = "Desk-scale imitation learning workbench")]
pub struct Cli {
    /// Run config file (imlw-runconfig-v1); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed [default: 0].
    #[arg(long, global = true, env = "IMLW_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Collect scripted demonstrations into a dataset directory.
    Collect(CollectArgs),
    /// Run the teleoperation WebSocket gateway.
    Serve(ServeArgs),
    /// Train a policy from scratch into a checkpoint registry.
    Train(TrainArgs),
    /// Continue training from an existing checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate every checkpoint of a run and select the best.
    Sweep(SweepArgs),
    /// Evaluate one checkpoint.
    Eval(EvalArgs),
    /// Roll out a checkpoint under an injected latency model.
    DeploySim(DeployArgs),
    /// Union of two datasets.
    Merge(MergeArgs),
    /// Dataset summary and normalization statistics.
    Stats(StatsArgs),
    /// Table-I style comparison from eval or sweep summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated case ids [default: all cases].
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<String>,
    /// Episodes per case [default: 10].
    #[arg(long)]
    pub per_case: Option<usize>,
    /// Demonstrator profile [default: expertA].
    #[arg(long)]
    pub profile: Option<String>,
    /// Task library JSON [default: built-in tasks].
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Camera resolution [default: 16].
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Episode timestamp in Unix ms [default: now].
    #[arg(long)]
    pub created_at: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = imlw_gateway::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Task library JSON [default: built-in tasks].
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Dataset directory for saved episodes.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One tick per control message instead of a 20 Hz timer.
    #[arg(long)]
    pub lockstep: bool,
    /// Attach base64 raster previews to state messages.
    #[arg(long)]
    pub previews: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Diffusion steps T [default: 50].
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// Executed steps per horizon [default: 4].
    #[arg(long)]
    pub execute_steps: Option<usize>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// enc-small | enc-large | enc-pyramid [default: enc-small].
    #[arg(long)]
    pub encoder: Option<EncoderVariant>,
    /// temporal-conv | attention [default: temporal-conv].
    #[arg(long)]
    pub noisenet: Option<NoiseNetVariant>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Registry root; runs land in <out>/<run_id>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint bundle inside a run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalFlags {
    #[arg(long)]
    pub task: Option<String>,
    /// Task library JSON [default: built-in tasks].
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Number of evaluators [default: 4].
    #[arg(long)]
    pub evaluators: Option<usize>,
    /// Trials per case [default: 5].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Per-evaluator verdict flip probability [default: 0].
    #[arg(long)]
    pub flip_noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Run directory holding run.json.
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    /// Output directory [default: the run directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DeployArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub task: Option<String>,
    /// Task library JSON [default: built-in tasks].
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// [default: first case]
    #[arg(long)]
    pub case: Option<String>,
    /// Seconds [default: 0].
    #[arg(long)]
    pub latency_fixed: Option<f64>,
    /// Seconds [default: 0].
    #[arg(long)]
    pub latency_jitter: Option<f64>,
    /// Seconds [default: 0.05].
    #[arg(long)]
    pub slack: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Collector tag to restrict to.
    #[arg(long)]
    pub collector: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// summary.json files or directories containing one.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Task library JSON [default: built-in tasks].
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric_diffusion = |d: &DiffusionError| matches!(d, DiffusionError::Diverged { .. });
    let numeric_train = |t: &TrainError| match t {
        TrainError::NonFinite { .. } => true,
        TrainError::Diffusion(d) => numeric_diffusion(d),
        _ => false,
    };
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        let numeric = cause.downcast_ref::<TrainError>().is_some_and(numeric_train)
            || cause.downcast_ref::<DiffusionError>().is_some_and(numeric_diffusion)
            || cause.downcast_ref::<EvalError>().is_some_and(|v| match v {
                EvalError::Policy(d) => numeric_diffusion(d),
                EvalError::Train(t) => numeric_train(t),
                _ => false,
            })
            || cause.downcast_ref::<DeployError>().is_some_and(|v| matches!(v, DeployError::Policy(d) if numeric_diffusion(d)));
        if numeric {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
