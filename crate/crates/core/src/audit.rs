//! Full-log audits of a finished run, computed from the transfer records
//! alone so they do not share code paths with the engine.

use std::collections::BTreeMap;

use crate::engine::{transfer_time, RunResult};
use crate::hybrid::Mode;
use crate::metrics::{BlockTransferRecord, Outcome};
use crate::swarm::PeerId;
use crate::time::SimTime;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub violations: Vec<String>,
    /// Pearson correlation of bytes sent against bytes received over
    /// leecher pairs; `None` with fewer than two pairs or no variance.
    pub tit_for_tat: Option<f64>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Largest total weight of intervals `[start, end)` alive at one instant.
/// An open end never closes.
pub fn max_overlap(intervals: &[(SimTime, Option<SimTime>, u64)]) -> u64 {
    let mut edges: Vec<(SimTime, i8, u64)> = Vec::with_capacity(intervals.len() * 2);
    for &(start, end, w) in intervals {
        if end == Some(start) {
            continue;
        }
        edges.push((start, 1, w));
        if let Some(e) = end {
            edges.push((e, -1, w));
        }
    }
    // closings sort before openings at the same instant
    edges.sort_by_key(|&(t, kind, _)| (t, kind));
    let (mut cur, mut best) = (0u64, 0u64);
    for (_, kind, w) in edges {
        if kind > 0 {
            cur += w;
            best = best.max(cur);
        } else {
            cur -= w;
        }
    }
    best
}

/// Sample Pearson correlation; `None` when undefined.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn span(r: &BlockTransferRecord) -> (SimTime, Option<SimTime>) {
    (r.t0, r.end)
}

/// Checks every run-level invariant against the recorded transfers and
/// samples. `u_default` is the baseline per-peer connection limit.
pub fn audit_run(run: &RunResult, u_default: u32) -> AuditReport {
    let mut v = Vec::new();
    let recs = &run.metrics.records;
    let spec = |p: PeerId| &run.peers[p.index()].spec;

    let mut by_src: BTreeMap<PeerId, Vec<&BlockTransferRecord>> = BTreeMap::new();
    let mut by_dst: BTreeMap<PeerId, Vec<&BlockTransferRecord>> = BTreeMap::new();
    for r in recs {
        by_src.entry(r.source).or_default().push(r);
        by_dst.entry(r.dest).or_default().push(r);
    }

    for (&src, rs) in &by_src {
        let up = spec(src).bandwidth.up_rate();
        let rate: Vec<_> = rs.iter().map(|r| (span(r).0, span(r).1, r.rate)).collect();
        let peak = max_overlap(&rate);
        if peak > up {
            v.push(format!("{src} uploads {peak} B/s over its {up} B/s uplink"));
        }
        if run.mode == Mode::Baseline {
            let conns: Vec<_> = rs.iter().map(|r| (r.t0, r.end, u64::from(r.connections))).collect();
            let peak = max_overlap(&conns);
            if peak > u64::from(u_default) {
                v.push(format!("{src} holds {peak} upload connections in baseline"));
            }
        }
    }
    for (&dst, rs) in &by_dst {
        let down = spec(dst).bandwidth.down_rate();
        let rate: Vec<_> = rs.iter().map(|r| (r.t0, r.end, r.rate)).collect();
        let peak = max_overlap(&rate);
        if peak > down {
            v.push(format!("{dst} receives {peak} B/s over its {down} B/s downlink"));
        }
    }

    for r in recs {
        if let Some(b) = r.budget {
            if r.connections > b {
                v.push(format!(
                    "{}->{} uses {} connections over budget {b}",
                    r.source, r.dest, r.connections
                ));
            }
        }
        if r.outcome == Outcome::Delivered {
            let tx = r.tx.expect("delivered records carry tx");
            if tx - r.t0 < r.base_latency {
                v.push(format!("{}->{} {} beat its base latency", r.source, r.dest, r.block));
            }
            if transfer_time(r.bytes, r.rate, r.base_latency).map(|d| r.t0 + d) != Some(tx) {
                v.push(format!("{}->{} {} arrived off its link schedule", r.source, r.dest, r.block));
            }
        }
    }

    for s in &run.metrics.samples {
        let accounted = s.cumulative_blocks + s.in_flight + s.cancelled + s.redundant;
        if accounted != s.requested {
            v.push(format!(
                "at {} {} requests but {accounted} accounted for",
                s.t, s.requested
            ));
        }
        if s.mobile_served_fraction * 100.0 > s.max_mobile_pct + 1e-9 {
            v.push(format!(
                "at {} {:.1}% of mobile peers served above the {:.1}% bound",
                s.t,
                s.mobile_served_fraction * 100.0,
                s.max_mobile_pct
            ));
        }
    }
    for w in run.metrics.samples.windows(2) {
        if w[1].cumulative_blocks < w[0].cumulative_blocks {
            v.push(format!("cumulative blocks fell at {}", w[1].t));
        }
    }

    let delivered = recs.iter().filter(|r| r.outcome == Outcome::Delivered).count() as u64;
    let held: u64 = run
        .peers
        .iter()
        .filter(|p| !p.spec.seeder)
        .map(|p| u64::from(p.held_blocks))
        .sum();
    if delivered != held {
        v.push(format!("{delivered} blocks delivered but leechers hold {held}"));
    }

    let c = &run.checks;
    for (name, n) in [
        ("uplink overcommit in a plan", c.uplink_violations),
        ("downlink overcommit in a plan", c.downlink_violations),
        ("connection budget exceeded in a plan", c.budget_violations),
        ("baseline plan over the slot limit", c.baseline_slot_violations),
        ("optimistic unchoke of a static seeder", c.optimistic_static_seeder),
        ("mobile service above the capacity bound", c.capacity_bound_violations),
        ("source drop left a peer without sources", c.starved_by_drop),
    ] {
        if n > 0 {
            v.push(format!("{n} x {name}"));
        }
    }

    AuditReport {
        violations: v,
        tit_for_tat: tit_for_tat(run),
    }
}

/// Correlation between what each leecher sent to and received from every
/// other leecher it traded with.
pub fn tit_for_tat(run: &RunResult) -> Option<f64> {
    let mut bytes: BTreeMap<(PeerId, PeerId), u64> = BTreeMap::new();
    for r in &run.metrics.records {
        let leecher = |p: PeerId| !run.peers[p.index()].spec.seeder;
        if r.outcome == Outcome::Delivered && leecher(r.source) && leecher(r.dest) {
            *bytes.entry((r.source, r.dest)).or_default() += r.bytes;
        }
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&(a, b), &sent) in &bytes {
        if a < b {
            xs.push(sent as f64);
            ys.push(bytes.get(&(b, a)).copied().unwrap_or(0) as f64);
        } else if !bytes.contains_key(&(b, a)) {
            xs.push(0.0);
            ys.push(sent as f64);
        }
    }
    pearson(&xs, &ys)
}
