//! Batches of independent runs, their on-disk layout and paired comparison.
//!
//! Output layout: `<out>/<mode>/seed-<n>/{summary,timeseries}.csv`, plus
//! `compare.csv` for a baseline/hybrid pair.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::engine::{run_scenario, RunOptions, RunResult};
use crate::error::{ConfigError, Error};
use crate::hybrid::Mode;
use crate::metrics::{emit_csv, read_cumulative, read_summary, Summary};

/// Parses `"3"`, `"1,4,9"`, `"1-10"` (inclusive), `"0..10"` (exclusive) or
/// `"0..=9"`, and any comma-separated mix of them. Duplicates are rejected.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = |part: &str| ConfigError::single(format!("seeds: cannot parse {part:?}"));
    let num = |s: &str, part: &str| s.trim().parse::<u64>().map_err(|_| bad(part));
    let mut seeds = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(bad(part));
        }
        let (lo, hi) = if let Some((a, b)) = part.split_once("..=") {
            (num(a, part)?, num(b, part)?)
        } else if let Some((a, b)) = part.split_once("..") {
            let b = num(b, part)?;
            (num(a, part)?, b.checked_sub(1).ok_or_else(|| bad(part))?)
        } else if let Some((a, b)) = part.split_once('-') {
            (num(a, part)?, num(b, part)?)
        } else {
            let v = num(part, part)?;
            (v, v)
        };
        if lo > hi {
            return Err(ConfigError::single(format!("seeds: empty range {part:?}")));
        }
        seeds.extend(lo..=hi);
    }
    let mut seen = seeds.clone();
    seen.sort_unstable();
    if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
        return Err(ConfigError::single(format!("seeds: {} listed twice", w[0])));
    }
    Ok(seeds)
}

/// How a batch of runs is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Up to this many runs at once on a dedicated thread pool.
    #[cfg(feature = "parallel")]
    Parallel(usize),
}

impl Execution {
    /// `jobs` threads, or sequential when parallelism is compiled out or
    /// `jobs` is 1.
    pub fn with_jobs(jobs: usize) -> Self {
        #[cfg(feature = "parallel")]
        if jobs > 1 {
            return Execution::Parallel(jobs);
        }
        let _ = jobs;
        Execution::Sequential
    }
}

/// Default parallelism: one job per run, capped at the available cores.
pub fn default_jobs(runs: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    runs.clamp(1, cores)
}

/// Runs every `(mode, seed)` pair. Results come back in input order and do
/// not depend on the execution strategy.
pub fn run_batch(
    cfg: &Config,
    runs: &[(Mode, u64)],
    exec: Execution,
    opts: RunOptions,
) -> Result<Vec<RunResult>, Error> {
    cfg.validate()?;
    let one = |&(mode, seed): &(Mode, u64)| -> Result<RunResult, Error> {
        log::info!("starting {mode} seed {seed}");
        let r = run_scenario(cfg, mode, seed, opts)?;
        log::info!(
            "finished {mode} seed {seed}: completion {}",
            r.completion.map_or("none".to_string(), |t| t.to_string())
        );
        Ok(r)
    };
    match exec {
        Execution::Sequential => runs.iter().map(one).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel(threads) => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Sim(crate::error::SimError::Invariant(format!("thread pool: {e}"))))?;
            pool.install(|| runs.par_iter().map(one).collect())
        }
    }
}

pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.as_str()).join(format!("seed-{seed}"))
}

pub fn summarize(run: &RunResult) -> Summary {
    Summary::from_log(run.mode, run.seed, &run.metrics, run.completion, run.end)
}

/// Writes one run's CSVs and returns its directory.
pub fn write_run(out: &Path, run: &RunResult) -> Result<PathBuf, Error> {
    let dir = run_dir(out, run.mode, run.seed);
    emit_csv(Some(&summarize(run)), &run.metrics.samples, &dir)?;
    Ok(dir)
}

/// Writes a run's event log, one event per line.
pub fn write_events(path: &Path, run: &RunResult) -> Result<(), Error> {
    let mut text = String::new();
    for line in run.events.iter().flatten() {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seed numbers of the `seed-<n>` directories under `dir`, ascending.
pub fn list_seeds(dir: &Path) -> Result<Vec<u64>, Error> {
    let mut seeds = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|n| n.strip_prefix("seed-")) {
            if let Ok(seed) = n.parse() {
                seeds.push(seed);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub d_mean_latency: Option<f64>,
    pub d_mean_latency_mobile: Option<f64>,
    pub d_c_avg: f64,
    pub d_completion_time: Option<f64>,
    pub baseline_blocks: u64,
    pub hybrid_blocks: u64,
    pub extra_blocks_pct: Option<f64>,
}

/// Hybrid-minus-baseline deltas per seed, plus how often hybrid came out
/// ahead on each metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub checkpoint_s: f64,
    pub rows: Vec<CompareRow>,
    pub wins_latency: usize,
    pub wins_latency_mobile: usize,
    pub wins_c_avg: usize,
    pub wins_completion: usize,
    pub wins_blocks: usize,
}

pub const COMPARE_HEADER: [&str; 8] = [
    "seed",
    "d_mean_latency",
    "d_mean_latency_mobile",
    "d_c_avg",
    "d_completion_time",
    "baseline_blocks_at_checkpoint",
    "hybrid_blocks_at_checkpoint",
    "extra_blocks_pct",
];

fn diff(h: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(h? - b?)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Cumulative blocks at the last sample not after `t`.
pub fn blocks_at(series: &[(f64, u64)], t: f64) -> u64 {
    series
        .iter()
        .take_while(|&&(s, _)| s <= t + 1e-9)
        .last()
        .map_or(0, |&(_, c)| c)
}

/// One run's summary with its `(t seconds, cumulative blocks)` series.
pub type SeedSeries = (Summary, Vec<(f64, u64)>);

/// Pairs per-seed results. The checkpoint is `checkpoint_frac` of the
/// median baseline completion time, or of the run length when no baseline
/// run completed.
pub fn compare(
    baseline: &[SeedSeries],
    hybrid: &[SeedSeries],
    checkpoint_frac: f64,
) -> Result<Comparison, Error> {
    let seeds = |runs: &[SeedSeries]| runs.iter().map(|(s, _)| s.seed).collect::<Vec<_>>();
    let (bs, hs) = (seeds(baseline), seeds(hybrid));
    if bs != hs || bs.is_empty() {
        return Err(Error::SeedMismatch {
            baseline: bs,
            hybrid: hs,
        });
    }
    let completions: Vec<f64> = baseline.iter().filter_map(|(s, _)| s.completion_time).collect();
    let horizon = median(&completions).unwrap_or_else(|| {
        let ends: Vec<f64> = baseline.iter().filter_map(|(_, ts)| ts.last().map(|x| x.0)).collect();
        median(&ends).unwrap_or(0.0)
    });
    let checkpoint_s = checkpoint_frac * horizon;

    let rows: Vec<CompareRow> = baseline
        .iter()
        .zip(hybrid)
        .map(|((b, bt), (h, ht))| {
            let (bb, hb) = (blocks_at(bt, checkpoint_s), blocks_at(ht, checkpoint_s));
            CompareRow {
                seed: b.seed,
                d_mean_latency: diff(h.mean_block_latency, b.mean_block_latency),
                d_mean_latency_mobile: diff(h.mean_block_latency_mobile, b.mean_block_latency_mobile),
                d_c_avg: h.c_avg - b.c_avg,
                d_completion_time: diff(h.completion_time, b.completion_time),
                baseline_blocks: bb,
                hybrid_blocks: hb,
                extra_blocks_pct: (bb > 0).then(|| (hb as f64 / bb as f64 - 1.0) * 100.0),
            }
        })
        .collect();
    let count = |f: &dyn Fn(&CompareRow) -> bool| rows.iter().filter(|r| f(r)).count();
    Ok(Comparison {
        checkpoint_s,
        wins_latency: count(&|r| r.d_mean_latency.is_some_and(|d| d < 0.0)),
        wins_latency_mobile: count(&|r| r.d_mean_latency_mobile.is_some_and(|d| d < 0.0)),
        wins_c_avg: count(&|r| r.d_c_avg > 0.0),
        wins_completion: count(&|r| r.d_completion_time.is_some_and(|d| d < 0.0)),
        wins_blocks: count(&|r| r.hybrid_blocks > r.baseline_blocks),
        rows,
    })
}

fn load_runs(dir: &Path, seeds: &[u64]) -> Result<Vec<SeedSeries>, Error> {
    seeds
        .iter()
        .map(|s| {
            let d = dir.join(format!("seed-{s}"));
            Ok((read_summary(&d.join("summary.csv"))?, read_cumulative(&d.join("timeseries.csv"))?))
        })
        .collect()
}

/// Compares two mode directories such as `<out>/baseline` and `<out>/hybrid`.
pub fn compare_dirs(baseline_dir: &Path, hybrid_dir: &Path, checkpoint_frac: f64) -> Result<Comparison, Error> {
    let (bs, hs) = (list_seeds(baseline_dir)?, list_seeds(hybrid_dir)?);
    if bs != hs || bs.is_empty() {
        return Err(Error::SeedMismatch {
            baseline: bs,
            hybrid: hs,
        });
    }
    compare(&load_runs(baseline_dir, &bs)?, &load_runs(hybrid_dir, &hs)?, checkpoint_frac)
}

/// Paired comparison of in-memory runs, matched by seed.
pub fn compare_runs(runs: &[RunResult], checkpoint_frac: f64) -> Result<Comparison, Error> {
    let side = |mode: Mode| {
        let mut v: Vec<SeedSeries> = runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| {
                let ts = r
                    .metrics
                    .samples
                    .iter()
                    .map(|s| (s.t.as_secs_f64(), s.cumulative_blocks))
                    .collect();
                (summarize(r), ts)
            })
            .collect();
        v.sort_by_key(|(s, _)| s.seed);
        v
    };
    compare(&side(Mode::Baseline), &side(Mode::Hybrid), checkpoint_frac)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `compare.csv`: one row per seed, then a `wins` tally row.
pub fn write_compare(path: &Path, cmp: &Comparison) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e| Error::csv(path, e);
    w.write_record(COMPARE_HEADER).map_err(csv_err)?;
    for r in &cmp.rows {
        w.write_record([
            r.seed.to_string(),
            cell(r.d_mean_latency),
            cell(r.d_mean_latency_mobile),
            r.d_c_avg.to_string(),
            cell(r.d_completion_time),
            r.baseline_blocks.to_string(),
            r.hybrid_blocks.to_string(),
            cell(r.extra_blocks_pct),
        ])
        .map_err(csv_err)?;
    }
    w.write_record([
        "wins".to_string(),
        cmp.wins_latency.to_string(),
        cmp.wins_latency_mobile.to_string(),
        cmp.wins_c_avg.to_string(),
        cmp.wins_completion.to_string(),
        String::new(),
        String::new(),
        cmp.wins_blocks.to_string(),
    ])
    .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Comparison {
    /// Short human-readable report.
    pub fn report(&self) -> String {
        let n = self.rows.len();
        let gains: Vec<f64> = self.rows.iter().filter_map(|r| r.extra_blocks_pct).collect();
        let mut s = format!("{n} seeds, checkpoint at {:.1} s\n", self.checkpoint_s);
        s += &format!("hybrid lower mean latency:        {}/{n}\n", self.wins_latency);
        s += &format!("hybrid lower mobile latency:      {}/{n}\n", self.wins_latency_mobile);
        s += &format!("hybrid higher average throughput: {}/{n}\n", self.wins_c_avg);
        s += &format!("hybrid earlier completion:        {}/{n}\n", self.wins_completion);
        s += &format!("hybrid more blocks at checkpoint: {}/{n}", self.wins_blocks);
        if let Some(m) = median(&gains) {
            s += &format!(" (median {m:+.1}%)");
        }
        s
    }
}
