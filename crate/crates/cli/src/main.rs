//! Command-line runner for mobiswarm experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use mobiswarm::config::Config;
use mobiswarm::engine::{RunOptions, RunResult};
use mobiswarm::error::ConfigError;
use mobiswarm::experiment::{
    compare_dirs, compare_runs, default_jobs, parse_seeds, run_batch, write_compare, write_events, write_run,
    Comparison, Execution,
};
use mobiswarm::hybrid::Mode;
use mobiswarm::Error;

const LOG_VAR: &str = "MOBISWARM_LOG";

#[derive(Parser)]
#[command(name = "mobiswarm", version, about = "BitTorrent swarm simulator with partially mobile peers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more seeds and write per-run CSVs.
    Run(RunArgs),
    /// Compare baseline and hybrid output directories seed by seed.
    Compare(CompareArgs),
    /// Run a seed range in both modes and write the comparison.
    Sweep(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Hybrid,
    Both,
}

impl ModeArg {
    fn modes(self) -> &'static [Mode] {
        match self {
            ModeArg::Baseline => &[Mode::Baseline],
            ModeArg::Hybrid => &[Mode::Hybrid],
            ModeArg::Both => &[Mode::Baseline, Mode::Hybrid],
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `both` for `sweep`; for `run`, to the config's
    /// `scenario.mode`, else `hybrid`.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Seed list or range: `3`, `1,4,9`, `1-10`, `0..10`, `0..=9`.
    /// Defaults to the config's seed for `run` and `1-10` for `sweep`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Concurrent runs; defaults to one per run, capped at the core count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Comparison checkpoint as a fraction of the median baseline
    /// completion; defaults to the config's `metrics.checkpoint_frac`.
    #[arg(long)]
    checkpoint_frac: Option<f64>,
    /// Also write each run's event log as `events.log`.
    #[arg(long)]
    event_log: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory holding `baseline/` and `hybrid/`; `compare.csv` is written here.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `<out>/baseline`.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Overrides `<out>/hybrid`.
    #[arg(long)]
    hybrid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    checkpoint_frac: f64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Sim(_) => 2,
        _ => 1,
    }
}

fn init_logging() -> Result<(), ConfigError> {
    let raw = std::env::var(LOG_VAR).unwrap_or_else(|_| "off".to_string());
    let level = LevelFilter::from_str(raw.trim())
        .map_err(|_| ConfigError::single(format!("{LOG_VAR}: expected off, info or debug, got {raw:?}")))?;
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn check_frac(frac: f64) -> Result<(), ConfigError> {
    if frac.is_finite() && frac > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::single(format!("checkpoint-frac must be positive, got {frac}")))
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => {
            let cfg = Config::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn execute(args: &RunArgs, sweep: bool) -> Result<(), Error> {
    let cfg = load_config(args.config.as_deref())?;
    let frac = args.checkpoint_frac.unwrap_or(cfg.metrics.checkpoint_frac);
    check_frac(frac)?;
    let mode = args.mode.unwrap_or(match (sweep, cfg.scenario.mode) {
        (true, _) => ModeArg::Both,
        (false, Some(Mode::Baseline)) => ModeArg::Baseline,
        (false, _) => ModeArg::Hybrid,
    });
    let seeds = match &args.seeds {
        Some(text) => parse_seeds(text)?,
        None if sweep => (1..=10).collect(),
        None => vec![cfg.scenario.rng_seed],
    };
    if args.jobs == Some(0) {
        return Err(ConfigError::single("jobs must be at least 1").into());
    }
    if sweep && mode != ModeArg::Both {
        return Err(ConfigError::single("sweep compares both modes; use --mode both or omit it").into());
    }

    let runs: Vec<(Mode, u64)> = seeds
        .iter()
        .flat_map(|&s| mode.modes().iter().map(move |&m| (m, s)))
        .collect();
    let jobs = args.jobs.unwrap_or_else(|| default_jobs(runs.len()));
    info!("{} runs on {jobs} job(s)", runs.len());
    let opts = RunOptions {
        record_events: args.event_log,
    };
    // Every run finishes in memory before anything is written.
    let results = run_batch(&cfg, &runs, Execution::with_jobs(jobs), opts)?;
    let cmp = if mode == ModeArg::Both {
        Some(compare_runs(&results, frac)?)
    } else {
        None
    };

    write_all(&args.out, &results, args.event_log)?;
    if let Some(cmp) = cmp {
        finish_compare(&args.out.join("compare.csv"), &cmp)?;
    }
    Ok(())
}

fn write_all(out: &Path, results: &[RunResult], events: bool) -> Result<(), Error> {
    for r in results {
        let dir = write_run(out, r)?;
        if events {
            write_events(&dir.join("events.log"), r)?;
        }
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn finish_compare(path: &Path, cmp: &Comparison) -> Result<(), Error> {
    write_compare(path, cmp)?;
    println!("{}", cmp.report());
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), Error> {
    check_frac(args.checkpoint_frac)?;
    let baseline = args.baseline.clone().unwrap_or_else(|| args.out.join(Mode::Baseline.as_str()));
    let hybrid = args.hybrid.clone().unwrap_or_else(|| args.out.join(Mode::Hybrid.as_str()));
    let cmp = compare_dirs(&baseline, &hybrid, args.checkpoint_frac)?;
    finish_compare(&args.out.join("compare.csv"), &cmp)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Run(a) => execute(a, false),
        Command::Sweep(a) => execute(a, true),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
