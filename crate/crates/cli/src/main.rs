//! `fedsim`: run, sweep, partition, compare and report federated experiments.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsim_core::metrics::Method;
use fedsim_core::{Algorithm, Error};

#[derive(Parser, Debug)]
#[command(name = "fedsim", version, about = "Federated learning simulation", after_help = exit::help_table())]
pub struct Cli {
    /// Log per-round progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment per seed; writes <out>/seed_<s>/ and a summary over seeds.
    Run(RunArgs),
    /// Run every point of a hyperparameter or local-epoch grid; selects by validation.
    Sweep(SweepArgs),
    /// Generate a synthetic partition: one CSV per client plus manifest.json.
    Partition(PartitionArgs),
    /// Pairwise rank-test matrix across two or more result directories.
    Compare(CompareArgs),
    /// Summary tables and plot-ready CSVs from a results directory.
    Report(ReportArgs),
    /// Print a benchmark preset as a config file.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set strategy.mu=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Seeds to run; defaults to the config's seed list.
    #[arg(long = "seed", num_args = 1..)]
    pub seeds: Vec<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid file (TOML); omit to use the default search space of the config's algorithm.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long = "seed", num_args = 1..)]
    pub seeds: Vec<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    /// Partition spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Benchmark {
    FeatureShift,
    LabelSkew,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Algorithm,
    #[arg(long, value_enum, default_value = "feature-shift")]
    pub benchmark: Benchmark,
}

#[derive(Args, Debug)]
pub struct SignificanceArgs {
    /// Test metric to compare (auroc, auprc, accuracy, loss).
    #[arg(long, default_value = "auroc")]
    pub metric: String,
    /// Exact null distribution (default: exact up to 20 observations, normal beyond).
    #[arg(long, conflicts_with = "approx")]
    pub exact: bool,
    /// Tie-corrected normal approximation.
    #[arg(long)]
    pub approx: bool,
    /// Decide each cell from the two one-sided tests.
    #[arg(long, conflicts_with = "two_sided")]
    pub one_sided: bool,
    /// Two-sided test (default).
    #[arg(long)]
    pub two_sided: bool,
}

impl SignificanceArgs {
    pub fn method(&self) -> Method {
        if self.exact {
            Method::Exact
        } else if self.approx {
            Method::Approx
        } else {
            Method::Auto
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, num_args = 2.., required = true)]
    pub results: Vec<PathBuf>,
    #[command(flatten)]
    pub sig: SignificanceArgs,
    /// Also write significance.csv into this directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub sig: SignificanceArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::ALL
        .into_iter()
        .find(|a| a.name() == s.to_ascii_lowercase())
        .ok_or_else(|| format!("unknown algorithm `{s}`"))
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("FEDSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(
            "FEDSIM_THREADS",
            format!("expected a positive integer, got `{raw}`"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("FEDSIM_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match init_threads().and_then(|()| commands::execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = exit::record(&e);
            eprintln!("{rec}");
            ExitCode::from(exit::code_for(e.kind()) as u8)
        }
    }
}
