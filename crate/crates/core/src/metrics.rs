//! Block transfer records, periodic samples and the CSV files built from them.
//!
//! Block latency is the time from issuing a request to the block arriving.
//! Throughput is delivered blocks per second of elapsed window.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::hybrid::Mode;
use crate::swarm::{BlockId, PeerClass, PeerId};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Delivered,
    Cancelled,
    Redundant,
    /// Still in flight when the run stopped.
    Pending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTransferRecord {
    pub block: BlockId,
    pub source: PeerId,
    pub dest: PeerId,
    pub dest_class: PeerClass,
    pub source_seeder: bool,
    pub bytes: u64,
    pub t0: SimTime,
    pub tx: Option<SimTime>,
    /// When the transfer stopped occupying the link.
    pub end: Option<SimTime>,
    pub outcome: Outcome,
    pub rate: u64,
    pub connections: u32,
    /// Tracker budget in force when a hybrid seeder started the transfer.
    pub budget: Option<u32>,
    pub base_latency: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: SimTime,
    pub cumulative_blocks: u64,
    pub throughput_window: f64,
    pub sdr: f64,
    pub mobile_served_fraction: f64,
    /// Capacity bound in percent at this instant.
    pub max_mobile_pct: f64,
    pub allocated_up_kbps: f64,
    pub requested: u64,
    pub in_flight: u64,
    pub cancelled: u64,
    pub redundant: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<BlockTransferRecord>,
    pub samples: Vec<Sample>,
    pub request_count: u64,
}

/// Per-block delay; `None` for anything that was not delivered.
pub fn block_latency(rec: &BlockTransferRecord) -> Option<f64> {
    match (rec.outcome, rec.tx) {
        (Outcome::Delivered, Some(tx)) => Some((tx - rec.t0).as_secs_f64()),
        _ => None,
    }
}

pub fn mean_latency<'a>(records: impl IntoIterator<Item = &'a BlockTransferRecord>) -> Option<f64> {
    let (n, sum) = records
        .into_iter()
        .filter_map(block_latency)
        .fold((0u64, 0.0), |(n, s), l| (n + 1, s + l));
    (n > 0).then(|| sum / n as f64)
}

fn delivered_at(rec: &BlockTransferRecord) -> Option<SimTime> {
    (rec.outcome == Outcome::Delivered).then_some(rec.tx).flatten()
}

/// Blocks per second delivered in `[start, end)`. Returns `None` for an empty
/// window.
pub fn avg_throughput(log: &MetricsLog, start: SimTime, end: SimTime) -> Option<f64> {
    if end <= start {
        return None;
    }
    let n = log
        .records
        .iter()
        .filter_map(delivered_at)
        .filter(|&t| t >= start && t < end)
        .count();
    Some(n as f64 / (end - start).as_secs_f64())
}

/// Delivered over requested, both counted up to `upto`.
pub fn sdr(log: &MetricsLog, upto: SimTime) -> f64 {
    let requested = log.records.iter().filter(|r| r.t0 <= upto).count();
    let delivered = log
        .records
        .iter()
        .filter_map(delivered_at)
        .filter(|&t| t <= upto)
        .count();
    if requested == 0 {
        1.0
    } else {
        delivered as f64 / requested as f64
    }
}

pub fn cumulative_blocks(log: &MetricsLog, t: SimTime) -> u64 {
    log.records
        .iter()
        .filter_map(delivered_at)
        .filter(|&tx| tx <= t)
        .count() as u64
}

/// `(k, kB uploaded after the k-th delivery)` in delivery order.
pub fn upload_capacity_per_request(log: &MetricsLog) -> Vec<(u64, f64)> {
    let mut delivered: Vec<(SimTime, u64)> = log
        .records
        .iter()
        .filter_map(|r| delivered_at(r).map(|t| (t, r.bytes)))
        .collect();
    delivered.sort_by_key(|&(t, _)| t);
    let mut total = 0u64;
    delivered
        .into_iter()
        .enumerate()
        .map(|(k, (_, b))| {
            total += b;
            (k as u64 + 1, total as f64 / 1024.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub completion_time: Option<f64>,
    pub mean_block_latency: Option<f64>,
    pub mean_block_latency_mobile: Option<f64>,
    pub mean_block_latency_static: Option<f64>,
    pub c_avg: f64,
    pub final_sdr: f64,
    pub peak_mobile_served: f64,
    pub delivered_blocks: u64,
}

impl Summary {
    /// `completion` is when the last leecher finished, `end` when the run
    /// stopped; throughput is averaged over whichever applies.
    pub fn from_log(mode: Mode, seed: u64, log: &MetricsLog, completion: Option<SimTime>, end: SimTime) -> Self {
        let delivered = log.records.iter().filter(|r| r.outcome == Outcome::Delivered).count() as u64;
        let span = completion.unwrap_or(end).as_secs_f64();
        let by_class = |c: PeerClass| mean_latency(log.records.iter().filter(|r| r.dest_class == c));
        Summary {
            mode,
            seed,
            completion_time: completion.map(SimTime::as_secs_f64),
            mean_block_latency: mean_latency(&log.records),
            mean_block_latency_mobile: by_class(PeerClass::Mobile),
            mean_block_latency_static: by_class(PeerClass::Static),
            c_avg: if span > 0.0 { delivered as f64 / span } else { 0.0 },
            final_sdr: sdr(log, SimTime::MAX),
            peak_mobile_served: log
                .samples
                .iter()
                .map(|s| s.mobile_served_fraction)
                .fold(0.0, f64::max),
            delivered_blocks: delivered,
        }
    }
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "mode",
    "seed",
    "completion_time",
    "mean_block_latency",
    "mean_block_latency_mobile",
    "mean_block_latency_static",
    "c_avg",
    "final_sdr",
    "peak_mobile_served",
    "delivered_blocks",
];

pub const TIMESERIES_HEADER: [&str; 6] = [
    "t",
    "cumulative_blocks",
    "throughput_window",
    "sdr",
    "mobile_served_fraction",
    "allocated_up_kBps",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, rows: Vec<Vec<String>>) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv` and `timeseries.csv` into `dir`.
pub fn emit_csv(summary: Option<&Summary>, samples: &[Sample], dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = |h: &[&str]| h.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let mut rows = vec![header(&SUMMARY_HEADER)];
    if let Some(s) = summary {
        rows.push(vec![
            s.mode.to_string(),
            s.seed.to_string(),
            opt(s.completion_time),
            opt(s.mean_block_latency),
            opt(s.mean_block_latency_mobile),
            opt(s.mean_block_latency_static),
            s.c_avg.to_string(),
            s.final_sdr.to_string(),
            s.peak_mobile_served.to_string(),
            s.delivered_blocks.to_string(),
        ]);
    }
    write_file(&dir.join("summary.csv"), rows)?;

    let mut rows = vec![header(&TIMESERIES_HEADER)];
    rows.extend(samples.iter().map(|s| {
        vec![
            s.t.as_secs_f64().to_string(),
            s.cumulative_blocks.to_string(),
            s.throughput_window.to_string(),
            s.sdr.to_string(),
            s.mobile_served_fraction.to_string(),
            s.allocated_up_kbps.to_string(),
        ]
    }));
    write_file(&dir.join("timeseries.csv"), rows)
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let got = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(parse_err(path, format!("unexpected header {got:?}")));
    }
    r.records().map(|rec| rec.map_err(|e| Error::csv(path, e))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T, Error> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, format!("bad value in column {}", i + 1)))
}

fn opt_field(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>, Error> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(path, rec, i).map(Some),
    }
}

pub fn read_summary(path: &Path) -> Result<Summary, Error> {
    let rows = read_rows(path, &SUMMARY_HEADER)?;
    let [rec] = rows.as_slice() else {
        return Err(parse_err(path, format!("expected one row, found {}", rows.len())));
    };
    let mode: String = field(path, rec, 0)?;
    Ok(Summary {
        mode: mode.parse().map_err(|e: String| parse_err(path, e))?,
        seed: field(path, rec, 1)?,
        completion_time: opt_field(path, rec, 2)?,
        mean_block_latency: opt_field(path, rec, 3)?,
        mean_block_latency_mobile: opt_field(path, rec, 4)?,
        mean_block_latency_static: opt_field(path, rec, 5)?,
        c_avg: field(path, rec, 6)?,
        final_sdr: field(path, rec, 7)?,
        peak_mobile_served: field(path, rec, 8)?,
        delivered_blocks: field(path, rec, 9)?,
    })
}

/// `(t, cumulative_blocks)` pairs from a timeseries file.
pub fn read_cumulative(path: &Path) -> Result<Vec<(f64, u64)>, Error> {
    read_rows(path, &TIMESERIES_HEADER)?
        .iter()
        .map(|rec| Ok((field(path, rec, 0)?, field(path, rec, 1)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t0: f64, tx: Option<f64>, outcome: Outcome) -> BlockTransferRecord {
        BlockTransferRecord {
            block: BlockId::new(0, 0),
            source: PeerId(0),
            dest: PeerId(1),
            dest_class: PeerClass::Static,
            source_seeder: true,
            bytes: 16_384,
            t0: SimTime::from_secs_f64(t0),
            tx: tx.map(SimTime::from_secs_f64),
            end: tx.map(SimTime::from_secs_f64),
            outcome,
            rate: 16_384,
            connections: 1,
            budget: None,
            base_latency: SimTime::ZERO,
        }
    }

    fn log(records: Vec<BlockTransferRecord>) -> MetricsLog {
        MetricsLog {
            request_count: records.len() as u64,
            records,
            samples: Vec::new(),
        }
    }

    #[test]
    fn latency_is_delivery_minus_request() {
        assert_eq!(block_latency(&rec(2.0, Some(2.5), Outcome::Delivered)), Some(0.5));
        assert_eq!(block_latency(&rec(2.0, Some(2.0), Outcome::Delivered)), Some(0.0));
        assert_eq!(block_latency(&rec(2.0, None, Outcome::Cancelled)), None);
        let rs = [rec(0.0, Some(0.5), Outcome::Delivered), rec(1.0, Some(2.5), Outcome::Delivered)];
        assert_eq!(mean_latency(&rs), Some(1.0));
    }

    #[test]
    fn throughput_counts_window_deliveries() {
        let l = log((0..100).map(|i| rec(0.0, Some(i as f64 * 0.5), Outcome::Delivered)).collect());
        assert_eq!(avg_throughput(&l, SimTime::ZERO, SimTime::from_secs(50)), Some(2.0));
        assert_eq!(avg_throughput(&log(vec![]), SimTime::ZERO, SimTime::from_secs(5)), Some(0.0));
        assert_eq!(avg_throughput(&l, SimTime::from_secs(5), SimTime::from_secs(5)), None);
    }

    #[test]
    fn sdr_ratio() {
        let mut rs: Vec<_> = (0..90).map(|_| rec(0.0, Some(1.0), Outcome::Delivered)).collect();
        rs.extend((0..10).map(|_| rec(0.0, None, Outcome::Cancelled)));
        assert_eq!(sdr(&log(rs), SimTime::from_secs(5)), 0.9);
        assert_eq!(sdr(&log(vec![]), SimTime::from_secs(5)), 1.0);
    }

    #[test]
    fn cumulative_starts_at_zero() {
        let l = log(vec![rec(0.0, Some(1.0), Outcome::Delivered)]);
        assert_eq!(cumulative_blocks(&l, SimTime::ZERO), 0);
        assert_eq!(cumulative_blocks(&l, SimTime::from_secs(1)), 1);
    }

    #[test]
    fn upload_capacity_in_kilobytes() {
        let l = log(vec![rec(0.0, Some(1.0), Outcome::Delivered)]);
        assert_eq!(upload_capacity_per_request(&l), vec![(1, 16.0)]);
    }

    #[test]
    fn empty_log_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_csv(None, &[], dir.path()).unwrap();
        let s = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(s, SUMMARY_HEADER.join(",") + "\n");
        let t = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert_eq!(t, TIMESERIES_HEADER.join(",") + "\n");
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_csv(None, &[], &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }

    #[test]
    fn summary_round_trips() {
        let l = log(vec![
            rec(0.0, Some(0.3), Outcome::Delivered),
            rec(0.1, Some(1.7), Outcome::Delivered),
            rec(0.2, None, Outcome::Cancelled),
        ]);
        let s = Summary::from_log(Mode::Hybrid, 7, &l, Some(SimTime::from_millis(1_700)), SimTime::from_secs(3));
        let dir = tempfile::tempdir().unwrap();
        emit_csv(Some(&s), &[], dir.path()).unwrap();
        let first = fs::read(dir.path().join("summary.csv")).unwrap();
        assert_eq!(read_summary(&dir.path().join("summary.csv")).unwrap(), s);
        emit_csv(Some(&s), &[], dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), first);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn windows_partition_and_cumulative_is_monotone(
            txs in proptest::collection::vec(0u64..50_000, 0..60),
            split in 1u64..50_000,
            a in 0u64..60_000,
            b in 0u64..60_000,
        ) {
            let l = log(txs.iter().map(|&ms| rec(0.0, Some(ms as f64 / 1000.0), Outcome::Delivered)).collect());
            let s = SimTime::from_millis(split);
            let full = avg_throughput(&l, SimTime::ZERO, SimTime::from_secs(50)).unwrap() * 50.0;
            let left = avg_throughput(&l, SimTime::ZERO, s).unwrap() * s.as_secs_f64();
            let right = avg_throughput(&l, s, SimTime::from_secs(50)).unwrap() * (50.0 - s.as_secs_f64());
            prop_assert_eq!(full.round() as u64, (left.round() + right.round()) as u64);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cumulative_blocks(&l, SimTime::from_millis(lo)) <= cumulative_blocks(&l, SimTime::from_millis(hi)));
        }

        #[test]
        fn float_fields_round_trip_exactly(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back: f64 = x.to_string().parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
