//! `redopt`: fit priors, recommend reductions, run leave-one-out
//! experiments and serve interactive sessions.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use redopt_core::{ResourceWeights, Specification};

#[derive(Debug, Parser)]
#[command(name = "redopt", version, about = "Pick the app reduction that best trades user satisfaction against resource savings")]
pub struct Cli {
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the population prior on a dataset's survey history.
    FitPrior(FitPriorArgs),
    /// Run the query loop for one app and print the recommendation.
    Recommend(RecommendArgs),
    /// Leave-one-out experiment over a dataset; writes a results CSV.
    Evaluate(EvaluateArgs),
    /// Serve interactive rating sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct FitPriorArgs {
    /// Dataset whose surveys form the history.
    #[arg(long, env = "REDOPT_HISTORY")]
    pub history: PathBuf,
    /// Where to write the prior file.
    #[arg(long, env = "REDOPT_OUT")]
    pub out: PathBuf,
    /// Factor applied to the fitted prior variances.
    #[arg(long, env = "REDOPT_SCALE", default_value_t = redopt_core::DEFAULT_PRIOR_SCALE)]
    pub scale: f64,
    /// Leave this app out of the history.
    #[arg(long, env = "REDOPT_EXCLUDE_APP")]
    pub exclude_app: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Answer from the dataset's recorded surveys.
    Replay,
    /// Answer from a linear ground-truth model plus noise.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Dataset containing the app.
    #[arg(long, env = "REDOPT_APP")]
    pub app: PathBuf,
    /// App to optimize; required when the dataset holds more than one.
    #[arg(long, env = "REDOPT_APP_ID")]
    pub app_id: Option<String>,
    /// Prior file. Without it the prior is fitted on the dataset's other
    /// apps, or left flat when they have too few surveys.
    #[arg(long, env = "REDOPT_PRIOR")]
    pub prior: Option<PathBuf>,
    /// Weight of resource savings against user satisfaction.
    #[arg(long, env = "REDOPT_LAMBDA")]
    pub lambda: f64,
    /// Resource weights, e.g. cpu=0,mem=0.5,net=0.5; must sum to 1.
    #[arg(long, env = "REDOPT_ALPHA", value_parser = parse_alpha)]
    pub alpha: ResourceWeights,
    /// Number of ratings to ask for.
    #[arg(long, env = "REDOPT_BUDGET")]
    pub budget: usize,
    #[arg(long, env = "REDOPT_ORACLE", value_enum, default_value_t = OracleKind::Replay)]
    pub oracle: OracleKind,
    /// Seed for the selection randomness and the synthetic oracle.
    #[arg(long, env = "REDOPT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth weights for the synthetic oracle, as a JSON array of 16
    /// numbers. Defaults to the built-in population weights.
    #[arg(long, env = "REDOPT_TRUTH_WEIGHTS")]
    pub truth_weights: Option<PathBuf>,
    /// Noise added to synthetic scores.
    #[arg(long, env = "REDOPT_NOISE_SD", default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Also write the full session trace here.
    #[arg(long, env = "REDOPT_TRACE_OUT")]
    pub trace_out: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset to hold apps out of.
    #[arg(long, env = "REDOPT_DATASET")]
    pub dataset: PathBuf,
    /// Experiment config (JSON). Defaults apply to omitted fields.
    #[arg(long, env = "REDOPT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Results CSV. A `.meta.json` file is written next to it.
    #[arg(long, env = "REDOPT_OUT")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, env = "REDOPT_SEED")]
    pub seed: Option<u64>,
    /// Directory for per-specification ρ curves (CSV and SVG).
    #[arg(long, env = "REDOPT_CURVE_DIR")]
    pub curve_dir: Option<PathBuf>,
    /// Also write binarized accuracy per app, budget and run to this CSV.
    #[arg(long, env = "REDOPT_ACCURACY_OUT")]
    pub accuracy_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Dataset with the apps that sessions can target.
    #[arg(long, env = "REDOPT_DATASET")]
    pub dataset: PathBuf,
    /// Prior file; fitted on the dataset's surveys when absent.
    #[arg(long, env = "REDOPT_PRIOR")]
    pub prior: Option<PathBuf>,
    #[arg(long, env = "REDOPT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "REDOPT_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Persist sessions here so finished ones survive a restart.
    #[arg(long, env = "REDOPT_SESSION_DIR")]
    pub session_dir: Option<PathBuf>,
    /// Seconds a query waits for its rating before the session aborts.
    #[arg(long, env = "REDOPT_RATING_TIMEOUT", default_value_t = 900)]
    pub rating_timeout: u64,
    /// Browser origin allowed by CORS; any origin when absent.
    #[arg(long, env = "REDOPT_CORS_ORIGIN")]
    pub cors_origin: Option<String>,
    /// Serve the browser client from this directory.
    #[arg(long, env = "REDOPT_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// Base seed for sessions created without one.
    #[arg(long, env = "REDOPT_SEED")]
    pub seed: Option<u64>,
}

fn parse_alpha(text: &str) -> Result<ResourceWeights, String> {
    let (mut cpu, mut mem, mut net) = (None, None, None);
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("expected name=value, got {part:?}"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("{key}: not a number: {value:?}"))?;
        let slot = match key.trim() {
            "cpu" => &mut cpu,
            "mem" => &mut mem,
            "net" => &mut net,
            other => return Err(format!("unknown resource {other:?}; use cpu, mem, net")),
        };
        if slot.replace(value).is_some() {
            return Err(format!("{} given twice", key.trim()));
        }
    }
    match (cpu, mem, net) {
        (Some(c), Some(m), Some(n)) => ResourceWeights::new(c, m, n).map_err(|e| e.to_string()),
        _ => Err("alpha needs cpu, mem and net".to_string()),
    }
}

pub fn spec_from(lambda: f64, alpha: ResourceWeights) -> Result<Specification, commands::Failure> {
    Specification::new(lambda, alpha).map_err(commands::Failure::user)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code())
        }
    }
}
