//! Command-line front end: `caregrid simulate` runs one seeded simulation,
//! `caregrid sweep` runs the participant-churn experiment over many seeds.
//!
//! Exit codes: 0 on success, 1 for usage/config/validation problems, 2 for
//! I/O failures.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caregrid::{
    aggregate_by_p_d, emit_plot_data, format_summary, load_config, run, run_sweep, sweep_csv,
    write_snapshot_csv, HarnessError, SimParams, SweepSpec, ValidationError,
};

#[derive(Parser)]
#[command(name = "caregrid", version, about = "Mutual-assistance community simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and print its census summary
    Simulate(SimulateArgs),
    /// Vary the participant churn rate across seeds and aggregate the runs
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Config file (`key = value` lines); omitted keys keep their defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of steps from the config
    #[arg(long)]
    steps: Option<u64>,
    /// Override the snapshot recording interval from the config
    #[arg(long, value_name = "N")]
    record_every: Option<u64>,
    /// Write the recorded census snapshots as CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Config file providing the base parameters
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Participant churn rates to sweep, comma separated (e.g. 0.1,0.15,0.25)
    #[arg(long = "p-d", value_name = "RATES", value_delimiter = ',', required = true)]
    p_d: Vec<f64>,
    /// Seeds: comma-separated values and/or exclusive ranges (e.g. 0..20,100)
    #[arg(long, value_name = "SEEDS", default_value = "0")]
    seeds: String,
    /// Override the number of steps from the config
    #[arg(long)]
    steps: Option<u64>,
    /// Write every run as a CSV row (defaults to stdout)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write plot-ready mean/stddev tables (TSV)
    #[arg(long, value_name = "FILE")]
    plot_out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Harness(HarnessError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Harness(HarnessError::Io { .. }) => 2,
            CliError::Harness(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Harness(err) => write!(f, "{err}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(err: HarnessError) -> Self {
        CliError::Harness(err)
    }
}

impl From<ValidationError> for CliError {
    fn from(err: ValidationError) -> Self {
        CliError::Harness(HarnessError::Validation(err))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version requests travel down this path as well and
            // must stay successful
            let is_help = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
    }
}

fn base_params(config: Option<&PathBuf>) -> Result<SimParams, CliError> {
    match config {
        Some(path) => Ok(load_config(path)?),
        None => Ok(SimParams::default()),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut params = base_params(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(steps) = args.steps {
        params.steps = steps;
    }
    if let Some(record_every) = args.record_every {
        params.record_every = record_every;
    }
    let (summary, snapshots) = run(&params)?;
    if let Some(path) = &args.out {
        write_snapshot_csv(path, &snapshots)?;
    }
    println!(
        "seed {}, {} steps, {} snapshots",
        params.seed,
        params.steps,
        snapshots.len()
    );
    print!("{}", format_summary(&summary));
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut base = base_params(args.config.as_ref())?;
    if let Some(steps) = args.steps {
        base.steps = steps;
    }
    let seeds = parse_seeds(&args.seeds).map_err(CliError::Usage)?;
    let spec = SweepSpec { p_d_values: args.p_d, seeds };
    let rows = run_sweep(&base, &spec)?;
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &csv)
            .map_err(|source| HarnessError::Io { path: path.clone(), source })?,
        None => print!("{csv}"),
    }
    let aggregates = aggregate_by_p_d(&rows);
    if let Some(path) = &args.plot_out {
        let tables = emit_plot_data(&aggregates)?;
        std::fs::write(path, tables)
            .map_err(|source| HarnessError::Io { path: path.clone(), source })?;
    }
    for agg in &aggregates {
        eprintln!(
            "p_d {}: failures {:.1} ± {:.1}, latency {:.2} ± {:.2} ({} runs)",
            agg.p_d,
            agg.mean_failures,
            agg.std_failures,
            agg.mean_latency,
            agg.std_latency,
            agg.runs
        );
    }
    Ok(())
}

/// Expand a seed expression: comma-separated values and exclusive `lo..hi`
/// ranges, e.g. `0..20,100` gives seeds 0-19 and 100.
fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(format!("empty seed entry in `{text}`"));
        }
        if let Some((lo, hi)) = token.split_once("..") {
            let lo: u64 =
                lo.trim().parse().map_err(|e| format!("bad seed range `{token}`: {e}"))?;
            let hi: u64 =
                hi.trim().parse().map_err(|e| format!("bad seed range `{token}`: {e}"))?;
            if lo >= hi {
                return Err(format!("seed range `{token}` is empty (ranges are exclusive)"));
            }
            seeds.extend(lo..hi);
        } else {
            seeds.push(token.parse().map_err(|e| format!("bad seed `{token}`: {e}"))?);
        }
    }
    Ok(seeds)
}
