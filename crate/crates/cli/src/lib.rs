//! Reproducible pipelines over the `matlora` library: data generation,
//! training, evaluation and the analysis reports, all file-based.

pub mod checkpoint;
mod commands;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use matlora::model::CoreVariant;
use matlora::training::{Method, OptimizerKind};
use serde::{Deserialize, Serialize};

pub use commands::{run, RunConfig, RUN_CONFIG_FILE};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "MATLORA_OUT";

#[derive(Debug, Parser)]
#[command(name = "matlora", version, about = "Temporal low-rank adapters on rotating two-moons")]
pub struct Cli {
    /// Output directory (overrides $MATLORA_OUT).
    #[arg(long, global = true, env = OUT_ENV, default_value = "matlora-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a rotating two-moons domain sequence.
    GenData(GenDataArgs),
    /// Train one method and write checkpoint, report and loss curve.
    Train(TrainArgs),
    /// Per-domain accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Instrumented gradient-descent trace of a LoRA pair's subspaces.
    Stability(StabilityArgs),
    /// Parameter budgets and full-model overhead ratios.
    Params(ParamsArgs),
    /// Decision-boundary grids of a checkpoint at chosen timestamps.
    Boundary(BoundaryArgs),
    /// Full pipeline: data, every method, evaluation, stability, params, grids.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub domains: usize,
    /// Samples per domain; must be even.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Rotation between consecutive domains, degrees.
    #[arg(long, default_value_t = 18.0, allow_negative_numbers = true)]
    pub rotation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 9)]
    pub train_count: usize,
    /// Also write one CSV per domain.
    #[arg(long)]
    pub csv: bool,
}

impl Default for GenDataArgs {
    fn default() -> Self {
        GenDataArgs {
            seed: 0,
            domains: 12,
            samples: 200,
            rotation: 18.0,
            noise: 0.1,
            train_count: 9,
            csv: false,
        }
    }
}

/// Method name with an optional `:core` suffix, e.g. `matlora:markov`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub core: Option<CoreVariant>,
}

impl MethodSpec {
    pub fn usage() -> String {
        let cores: Vec<&str> = CoreVariant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "{} (matlora and distill accept ':{}')",
            Method::NAMES.join(", "),
            cores.join("|")
        )
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.core {
            Some(c) => write!(f, "{}:{}", self.method, c),
            None => write!(f, "{}", self.method),
        }
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("unknown method '{s}'; expected one of {}", MethodSpec::usage());
        let (name, core) = match s.split_once(':') {
            Some((n, c)) => (n, Some(c.parse::<CoreVariant>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let method: Method = name.parse().map_err(|_| bad())?;
        if core.is_some() && !matches!(method, Method::Matlora | Method::Distill) {
            return Err(bad());
        }
        Ok(MethodSpec { method, core })
    }
}

/// Training overrides on top of the defaults or a `--config` file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainOverrides {
    /// JSON file with a full or partial training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub r_prime: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Comma-separated hidden-layer indices carrying adapters.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer '{s}' (adam, sgd)")),
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Sequence file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// One of matlora, offline, last_domain, inc_finetune, multi_lora, distill.
    #[arg(long)]
    pub method: String,
    /// Temporal core for matlora and distill.
    #[arg(long)]
    pub core: Option<String>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated domain indices; empty means every test domain.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct StabilityArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Plain gradient-descent step size.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub steps_per_domain: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 64)]
    pub d: u64,
    #[arg(long, default_value_t = 64)]
    pub k: u64,
    #[arg(long, default_value_t = 8)]
    pub r: u64,
    #[arg(long, default_value_t = 4)]
    pub r_prime: u64,
    /// Number of training domains.
    #[arg(long, default_value_t = 9)]
    pub domains: u64,
    #[arg(long, default_value = "lindyn")]
    pub core: String,
    /// Parameter count of the full model for overhead ratios.
    #[arg(long, default_value_t = 1_000_000_000)]
    pub p_full: u64,
    /// Hidden width of the LSTM-over-parameters assumption.
    #[arg(long, default_value_t = 64)]
    pub lstm_hidden: u64,
}

impl Default for ParamsArgs {
    fn default() -> Self {
        ParamsArgs {
            d: 64,
            k: 64,
            r: 8,
            r_prime: 4,
            domains: 9,
            core: "lindyn".into(),
            p_full: 1_000_000_000,
            lstm_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BoundaryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated timestamps, one grid each.
    #[arg(long, value_delimiter = ',', default_value = "9,10,11")]
    pub times: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    #[arg(long, default_value_t = -2.5, allow_negative_numbers = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 3.5, allow_negative_numbers = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = -2.5, allow_negative_numbers = true)]
    pub y_min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub y_max: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReproduceArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adapter epochs for every method (default from the training config).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Boundary grid resolution.
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
}

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, names or inputs; exit code 2.
    Usage(String),
    /// Anything failing after the inputs were accepted; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<matlora::Error> for CliError {
    fn from(e: matlora::Error) -> Self {
        match e {
            matlora::Error::Argument(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
