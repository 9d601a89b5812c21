use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hapschain::config::{parse_config, ConfigError, ConsensusMode, ScenarioConfig};
use hapschain::experiment::{run_scenario, summary_line, sweep, ExperimentError, SweepAxis, SweepSpec};

/// Simulator for HAPS-hosted monitoring blockchains.
#[derive(Debug, Parser)]
#[command(name = "hapschain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write report.json.
    Run(RunArgs),
    /// Run a parameter sweep and write sweep.csv.
    Sweep(SweepArgs),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML scenario file; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// quico or pbft_baseline.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ConsensusMode>,
    /// Also write events.csv.
    #[arg(long)]
    events: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// tx_size (bytes) or pmn.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "quico,pbft_baseline")]
    modes: Vec<ConsensusMode>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ConsensusMode, String> {
    s.parse().map_err(|_| format!("unknown mode {s:?}; expected quico or pbft_baseline"))
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => parse_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load(args.common.config.as_deref())?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(mode) = args.mode {
                cfg.consensus = mode;
            }
            let report = run_scenario(&cfg, &args.common.out, args.events)?;
            println!("{}", summary_line(&report));
        }
        Command::Sweep(args) => {
            let base = load(args.common.config.as_deref())?;
            let spec = SweepSpec {
                axis: args.axis,
                values: args.values,
                seeds: args.seeds,
                modes: args.modes,
            };
            let workers = args
                .workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let rows = sweep(&base, &spec, workers, &args.common.out)?;
            println!(
                "{} rows written to {}",
                rows.len(),
                args.common.out.join("sweep.csv").display()
            );
        }
        Command::Defaults => print!("{}", ScenarioConfig::default().to_toml_string()),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
