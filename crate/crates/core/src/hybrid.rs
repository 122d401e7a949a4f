//! Seeder-side upload planning.
//!
//! A baseline seeder splits its uplink equally over at most `u_default`
//! destinations. A hybrid seeder may serve more destinations, opens several
//! connections toward mobile peers (up to the tracker budget) and never pushes
//! a destination past its remaining downlink; whatever a capped destination
//! cannot take is spread over the others.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::swarm::{PeerClass, PeerId};
use crate::tracker::ConnectionBudget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Hybrid,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(format!("unknown mode `{other}` (expected baseline or hybrid)")),
        }
    }
}

/// One destination handed to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanTarget {
    pub peer: PeerId,
    pub class: PeerClass,
    pub budget: ConnectionBudget,
    /// Downlink still available at the destination; `None` means unlimited.
    pub downlink_cap: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub dest: PeerId,
    pub slot: u32,
    pub rate: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadPlan {
    pub mode: Mode,
    pub allocations: Vec<Allocation>,
}

impl UploadPlan {
    pub fn empty(mode: Mode) -> Self {
        Self {
            mode,
            allocations: Vec::new(),
        }
    }

    pub fn total_rate(&self) -> u64 {
        self.allocations.iter().map(|a| a.rate).sum()
    }

    pub fn connections(&self) -> usize {
        self.allocations.len()
    }

    pub fn destinations(&self) -> BTreeSet<PeerId> {
        self.allocations.iter().map(|a| a.dest).collect()
    }

    /// Aggregate rate and connection count per destination.
    pub fn per_dest(&self) -> BTreeMap<PeerId, (u64, u32)> {
        let mut out: BTreeMap<PeerId, (u64, u32)> = BTreeMap::new();
        for a in &self.allocations {
            let e = out.entry(a.dest).or_default();
            e.0 += a.rate;
            e.1 += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanParams {
    pub min_seed_rate: u64,
    pub u_default: u32,
}

pub fn eligible_for_mobile_seeding(up_rate: u64, min_seed_rate: u64) -> bool {
    up_rate >= min_seed_rate
}

/// Splits `up_rate` over `targets`.
pub fn plan_uploads(up_rate: u64, targets: &[PlanTarget], mode: Mode, params: PlanParams) -> UploadPlan {
    match mode {
        Mode::Baseline => plan_baseline(up_rate, targets, params.u_default as usize),
        Mode::Hybrid => plan_hybrid(up_rate, targets, params.min_seed_rate),
    }
}

fn plan_baseline(up_rate: u64, targets: &[PlanTarget], max_dests: usize) -> UploadPlan {
    let dests: Vec<PeerId> = targets.iter().take(max_dests).map(|t| t.peer).collect();
    if dests.is_empty() {
        return UploadPlan::empty(Mode::Baseline);
    }
    let rate = up_rate / dests.len() as u64;
    UploadPlan {
        mode: Mode::Baseline,
        allocations: dests
            .into_iter()
            .filter(|_| rate > 0)
            .map(|dest| Allocation { dest, slot: 0, rate })
            .collect(),
    }
}

fn plan_hybrid(up_rate: u64, targets: &[PlanTarget], min_seed_rate: u64) -> UploadPlan {
    let eligible = eligible_for_mobile_seeding(up_rate, min_seed_rate);
    let targets: Vec<&PlanTarget> = targets
        .iter()
        .filter(|t| eligible || t.class == PeerClass::Static)
        .filter(|t| t.downlink_cap != Some(0))
        .collect();
    if targets.is_empty() || up_rate == 0 {
        return UploadPlan::empty(Mode::Hybrid);
    }

    let slots = connection_counts(up_rate, &targets);
    let totals = water_fill(up_rate, &targets, &slots);

    let mut allocations = Vec::new();
    for ((t, &k), &total) in targets.iter().zip(&slots).zip(&totals) {
        if total == 0 {
            continue;
        }
        let k = u64::from(k).min(total);
        let each = total / k;
        for slot in 0..k {
            let rate = if slot == 0 { total - each * (k - 1) } else { each };
            allocations.push(Allocation {
                dest: t.peer,
                slot: slot as u32,
                rate,
            });
        }
    }
    UploadPlan {
        mode: Mode::Hybrid,
        allocations,
    }
}

/// Connections per destination: one for static peers; for mobile peers
/// enough equal-rate connections to fill the downlink, within budget. Adding
/// connections lowers the per-connection rate, which can only raise the
/// count needed, so iterating from one connection each reaches a fixpoint.
fn connection_counts(up_rate: u64, targets: &[&PlanTarget]) -> Vec<u32> {
    let mut slots = vec![1u32; targets.len()];
    loop {
        let total: u64 = slots.iter().map(|&s| u64::from(s)).sum();
        let per_conn = (up_rate / total).max(1);
        let mut changed = false;
        for (t, s) in targets.iter().zip(slots.iter_mut()) {
            if t.class != PeerClass::Mobile {
                continue;
            }
            let budget = t.budget.max_connections.max(1);
            let want = match t.downlink_cap {
                Some(cap) => cap.div_ceil(per_conn).clamp(1, u64::from(budget)) as u32,
                None => budget,
            };
            if want > *s {
                *s = want;
                changed = true;
            }
        }
        if !changed {
            return slots;
        }
    }
}

/// Total rate per destination. Capped destinations take their cap; the rest
/// of the uplink is split equally per connection over the others.
fn water_fill(up_rate: u64, targets: &[&PlanTarget], slots: &[u32]) -> Vec<u64> {
    let mut totals = vec![0u64; targets.len()];
    let mut open: Vec<usize> = (0..targets.len()).collect();
    let mut remaining = up_rate;
    for _ in 0..=targets.len() {
        let open_slots: u64 = open.iter().map(|&i| u64::from(slots[i])).sum();
        if open_slots == 0 {
            break;
        }
        let per_slot = remaining / open_slots;
        let (capped, uncapped): (Vec<usize>, Vec<usize>) = open.iter().partition(|&&i| {
            targets[i]
                .downlink_cap
                .is_some_and(|cap| u64::from(slots[i]) * per_slot >= cap)
        });
        if capped.is_empty() {
            for &i in &uncapped {
                totals[i] = u64::from(slots[i]) * per_slot;
            }
            break;
        }
        for &i in &capped {
            let cap = targets[i].downlink_cap.expect("partitioned on cap");
            totals[i] = cap;
            remaining -= cap;
        }
        open = uncapped;
    }
    totals
}

/// Drops every connection whose mean block latency exceeds the threshold,
/// unless the destination would be left with no source. `sources_of(dest)`
/// reports how many sources the destination currently has.
pub fn drop_slow_connections(
    active: &[(PeerId, f64)],
    latency_threshold: f64,
    sources_of: impl Fn(PeerId) -> usize,
) -> BTreeSet<PeerId> {
    active
        .iter()
        .filter(|&&(dest, latency)| latency > latency_threshold && sources_of(dest) > 1)
        .map(|&(dest, _)| dest)
        .collect()
}

/// Receiver-side variant: which of this peer's sources to drop. The fastest
/// source is always kept when every source is slow.
pub fn drop_slow_sources(sources: &[(PeerId, f64)], latency_threshold: f64) -> BTreeSet<PeerId> {
    let mut drop: BTreeSet<PeerId> = sources
        .iter()
        .filter(|&&(_, l)| l > latency_threshold)
        .map(|&(p, _)| p)
        .collect();
    if !sources.is_empty() && drop.len() == sources.len() {
        let fastest = sources
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|&(p, _)| p)
            .expect("non-empty");
        drop.remove(&fastest);
    }
    drop
}

/// Upper bound, in percent, on the share of mobile peers that the given
/// seeder uplinks can serve at `r_min_mobile` each.
pub fn max_mobile_fraction(seeder_up_rates: &[u64], min_seed_rate: u64, num_mobile: usize, r_min_mobile: u64) -> f64 {
    if num_mobile == 0 {
        return 100.0;
    }
    let slots: u64 = seeder_up_rates
        .iter()
        .filter(|&&up| eligible_for_mobile_seeding(up, min_seed_rate))
        .map(|&up| up / r_min_mobile)
        .sum();
    100.0 * (slots as f64 / num_mobile as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KB: u64 = 1024;
    const PARAMS: PlanParams = PlanParams {
        min_seed_rate: 50 * KB,
        u_default: 5,
    };

    fn stat(p: u32, cap: Option<u64>) -> PlanTarget {
        PlanTarget {
            peer: PeerId(p),
            class: PeerClass::Static,
            budget: ConnectionBudget { max_connections: 5 },
            downlink_cap: cap,
        }
    }

    fn mob(p: u32, budget: u32, cap: u64) -> PlanTarget {
        PlanTarget {
            peer: PeerId(p),
            class: PeerClass::Mobile,
            budget: ConnectionBudget {
                max_connections: budget,
            },
            downlink_cap: Some(cap),
        }
    }

    #[test]
    fn baseline_splits_equally() {
        let t: Vec<_> = (1..=4).map(|p| stat(p, None)).collect();
        let plan = plan_uploads(100 * KB, &t, Mode::Baseline, PARAMS);
        assert_eq!(plan.connections(), 4);
        assert!(plan.allocations.iter().all(|a| a.rate == 25 * KB));
    }

    #[test]
    fn baseline_never_exceeds_default_slots() {
        let t: Vec<_> = (1..=8).map(|p| stat(p, None)).collect();
        let plan = plan_uploads(100 * KB, &t, Mode::Baseline, PARAMS);
        assert_eq!(plan.connections(), 5);
    }

    #[test]
    fn hybrid_may_exceed_default_slots() {
        let t: Vec<_> = (1..=6).map(|p| stat(p, None)).collect();
        let plan = plan_uploads(100 * KB, &t, Mode::Hybrid, PARAMS);
        assert_eq!(plan.connections(), 6);
        let each = 100 * KB / 6;
        assert!(plan.allocations.iter().all(|a| a.rate == each));
    }

    #[test]
    fn capped_destination_surplus_is_redistributed() {
        let mut t: Vec<_> = (1..=4).map(|p| stat(p, None)).collect();
        t[0].downlink_cap = Some(10 * KB);
        let plan = plan_uploads(100 * KB, &t, Mode::Hybrid, PARAMS);
        let per = plan.per_dest();
        assert_eq!(per[&PeerId(1)].0, 10 * KB);
        // water-filling oracle: the other three share 90 kB/s
        for p in 2..=4 {
            assert_eq!(per[&PeerId(p)].0, 30 * KB);
        }
        assert_eq!(plan.total_rate(), 100 * KB);
    }

    #[test]
    fn mobile_destination_gets_connections_to_fill_downlink() {
        // 500 kB/s over a mobile (budget 10, 50 kB/s) and a static peer:
        // per connection 250 then the mobile needs only one connection
        let t = [mob(1, 10, 50 * KB), stat(2, None)];
        let plan = plan_uploads(500 * KB, &t, Mode::Hybrid, PARAMS);
        let per = plan.per_dest();
        assert_eq!(per[&PeerId(1)], (50 * KB, 1));
        assert_eq!(per[&PeerId(2)], (450 * KB, 1));

        // many peers: per connection 100 / 8 = 12.5 kB/s, so the mobile
        // wants ceil(40 / 12.5) = 4 connections, capped by a budget of 2
        let mut t: Vec<_> = (2..=8).map(|p| stat(p, None)).collect();
        t.insert(0, mob(1, 2, 40 * KB));
        let plan = plan_uploads(100 * KB, &t, Mode::Hybrid, PARAMS);
        assert_eq!(plan.per_dest()[&PeerId(1)].1, 2);
    }

    #[test]
    fn ineligible_seeder_skips_mobile_peers() {
        let t = [mob(1, 4, 40 * KB), stat(2, None)];
        let plan = plan_uploads(30 * KB, &t, Mode::Hybrid, PARAMS);
        assert_eq!(plan.destinations(), BTreeSet::from([PeerId(2)]));
    }

    #[test]
    fn empty_destinations_give_empty_plan() {
        assert!(plan_uploads(100 * KB, &[], Mode::Hybrid, PARAMS).allocations.is_empty());
        assert!(plan_uploads(100 * KB, &[], Mode::Baseline, PARAMS).allocations.is_empty());
    }

    #[test]
    fn eligibility_threshold_is_inclusive() {
        assert!(eligible_for_mobile_seeding(200 * KB, 50 * KB));
        assert!(!eligible_for_mobile_seeding(30 * KB, 50 * KB));
        assert!(eligible_for_mobile_seeding(50 * KB, 50 * KB));
    }

    #[test]
    fn slow_connections_are_dropped() {
        let active = [(PeerId(1), 0.2), (PeerId(2), 5.0)];
        assert_eq!(drop_slow_connections(&active, 2.0, |_| 3), BTreeSet::from([PeerId(2)]));
        assert!(drop_slow_connections(&[(PeerId(1), 0.2), (PeerId(2), 1.9)], 2.0, |_| 3).is_empty());
        // B depends on us alone
        assert!(drop_slow_connections(&active, 2.0, |_| 1).is_empty());
    }

    #[test]
    fn receiver_keeps_its_fastest_source() {
        let all_slow = [(PeerId(1), 6.0), (PeerId(2), 3.0), (PeerId(3), 9.0)];
        assert_eq!(drop_slow_sources(&all_slow, 2.0), BTreeSet::from([PeerId(1), PeerId(3)]));
        let mixed = [(PeerId(1), 6.0), (PeerId(2), 0.3)];
        assert_eq!(drop_slow_sources(&mixed, 2.0), BTreeSet::from([PeerId(1)]));
        assert!(drop_slow_sources(&[], 2.0).is_empty());
    }

    #[test]
    fn mobile_capacity_curve() {
        // brute-force slot count: one seeder with 10 slots of 10 kB/s
        let slots: u64 = (1..=100).step_by(10).count() as u64;
        assert_eq!(slots, 10);
        assert_eq!(max_mobile_fraction(&[100 * KB], 50 * KB, 20, 10 * KB), 50.0);
        assert_eq!(max_mobile_fraction(&[30 * KB], 50 * KB, 20, 10 * KB), 0.0);
        assert_eq!(max_mobile_fraction(&[], 50 * KB, 20, 10 * KB), 0.0);
        assert_eq!(max_mobile_fraction(&[500 * KB], 50 * KB, 20, 10 * KB), 100.0);
        assert_eq!(max_mobile_fraction(&[100 * KB], 50 * KB, 0, 10 * KB), 100.0);
    }

    fn target_strategy() -> impl Strategy<Value = PlanTarget> {
        (
            0u32..1000,
            any::<bool>(),
            1u32..=32,
            proptest::option::of(0u64..600_000),
        )
            .prop_map(|(p, mobile, budget, cap)| PlanTarget {
                peer: PeerId(p),
                class: if mobile { PeerClass::Mobile } else { PeerClass::Static },
                budget: ConnectionBudget {
                    max_connections: budget,
                },
                downlink_cap: if mobile { Some(cap.unwrap_or(40_960)) } else { cap },
            })
    }

    fn distinct(targets: Vec<PlanTarget>) -> Vec<PlanTarget> {
        let mut seen = BTreeSet::new();
        targets.into_iter().filter(|t| seen.insert(t.peer)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn plan_respects_uplink_budgets_and_caps(
            up in 1u64..2_000_000,
            targets in proptest::collection::vec(target_strategy(), 0..16),
            hybrid in any::<bool>(),
        ) {
            let targets = distinct(targets);
            let mode = if hybrid { Mode::Hybrid } else { Mode::Baseline };
            let plan = plan_uploads(up, &targets, mode, PARAMS);
            prop_assert!(plan.total_rate() <= up);
            let per = plan.per_dest();
            match mode {
                Mode::Baseline => prop_assert!(per.len() <= 5 && plan.connections() <= 5),
                Mode::Hybrid => {
                    for t in &targets {
                        if let Some(&(rate, conns)) = per.get(&t.peer) {
                            prop_assert!(conns <= t.budget.max_connections.max(1));
                            if let Some(cap) = t.downlink_cap {
                                prop_assert!(rate <= cap);
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn water_fill_conserves_rate(
            up in 1_000u64..2_000_000,
            targets in proptest::collection::vec(target_strategy(), 1..16),
        ) {
            let targets = distinct(targets);
            let plan = plan_uploads(up, &targets, Mode::Hybrid, PARAMS);
            let per = plan.per_dest();
            let served: Vec<&PlanTarget> = targets.iter().filter(|t| per.contains_key(&t.peer)).collect();
            let all_capped = served.iter().all(|t| {
                t.downlink_cap.is_some_and(|c| per[&t.peer].0 == c)
            });
            if !all_capped {
                // uncapped peers absorb the surplus up to integer rounding
                let conns = plan.connections() as u64;
                prop_assert!(up - plan.total_rate() < conns.max(1) * 2 + 2 * served.len() as u64,
                    "left {} of {}", up - plan.total_rate(), up);
            }
        }

        #[test]
        fn eligibility_is_monotone(a in 0u64..1_000_000, b in 0u64..1_000_000, min in 1u64..500_000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if eligible_for_mobile_seeding(lo, min) {
                prop_assert!(eligible_for_mobile_seeding(hi, min));
            }
        }

        #[test]
        fn capacity_curve_bounded(
            ups in proptest::collection::vec(1u64..1_000_000, 0..12),
            n in 0usize..200,
            rmin in 1u64..100_000,
        ) {
            let f = max_mobile_fraction(&ups, 51_200, n, rmin);
            prop_assert!((0.0..=100.0).contains(&f));
        }
    }
}
