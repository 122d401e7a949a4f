use std::collections::{BTreeMap, BTreeSet};

use log::{debug, log_enabled, Level};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::churn::{churn_step, ChurnModel};
use super::event::{EventKind, EventQueue};
use super::scenario::{build_scenario, NodeSpec, ScenarioPlan, SeederRole};
use super::transfer_time;
use crate::config::{Config, Dist};
use crate::error::{ConfigError, SimError};
use crate::hybrid::{
    drop_slow_sources, eligible_for_mobile_seeding, max_mobile_fraction, plan_uploads, Mode, PlanParams, PlanTarget,
};
use crate::metrics::{BlockTransferRecord, MetricsLog, Outcome, Sample};
use crate::protocol::{
    handle_block_received, optimistic_unchoke, recompute_chokes, recompute_chokes_by, warmup_factor, ChokeDecision,
    NeighborLink, OptimisticCandidate, PeerState,
};
use crate::swarm::{BlockId, FileMap, PeerClass, PeerId};
use crate::time::SimTime;
use crate::tracker::{AnnounceRequest, ConnectionBudget, Tracker, TrackerParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the full event log in memory.
    pub record_events: bool,
}

/// Invariant checks evaluated while the run is in progress.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunChecks {
    pub plans: u64,
    pub uplink_violations: u64,
    pub downlink_violations: u64,
    pub budget_violations: u64,
    pub baseline_slot_violations: u64,
    pub optimistic_picks: u64,
    pub optimistic_static_seeder: u64,
    pub capacity_bound_violations: u64,
    pub drops: u64,
    pub starved_by_drop: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerOutcome {
    pub spec: NodeSpec,
    pub completed_at: Option<SimTime>,
    pub held_blocks: u32,
    pub redundant: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub metrics: MetricsLog,
    pub events: Option<Vec<String>>,
    /// When the last leecher finished, if all did.
    pub completion: Option<SimTime>,
    pub end: SimTime,
    pub peers: Vec<PeerOutcome>,
    pub checks: RunChecks,
    pub map: FileMap,
}

#[derive(Debug, Clone)]
struct Params {
    mode: Mode,
    map: FileMap,
    until: SimTime,
    sample_interval: SimTime,
    choke_interval: SimTime,
    optimistic_interval: SimTime,
    announce_interval: SimTime,
    rate_window: SimTime,
    regular_slots: usize,
    trial_len: SimTime,
    warmup_min: f64,
    rank_by_our: bool,
    u_default: u32,
    min_seed_rate: u64,
    r_min_mobile: u64,
    latency_threshold: f64,
    rotate_mobile: bool,
    max_neighbors: usize,
    churn: ChurnModel,
    latency_mobile: Dist,
    latency_static: Dist,
}

impl Params {
    fn new(cfg: &Config, mode: Mode, map: FileMap) -> Self {
        let secs = SimTime::from_secs_f64;
        Self {
            mode,
            map,
            until: secs(cfg.scenario.sim_duration_s),
            sample_interval: secs(cfg.metrics.sample_interval_s),
            choke_interval: secs(cfg.protocol.choke_interval_s),
            optimistic_interval: secs(cfg.protocol.optimistic_interval_s),
            announce_interval: secs(cfg.tracker.announce_interval_s),
            rate_window: secs(cfg.protocol.rate_window_s),
            regular_slots: cfg.protocol.regular_slots,
            trial_len: secs(cfg.protocol.trial_len_s),
            warmup_min: cfg.protocol.warmup_min,
            rank_by_our: cfg.protocol.rank_by_our,
            u_default: cfg.tracker.u_default,
            min_seed_rate: cfg.hybrid.min_seed_rate,
            r_min_mobile: cfg.hybrid.r_min_mobile,
            latency_threshold: cfg.hybrid.latency_threshold_s,
            rotate_mobile: cfg.hybrid.rotate_mobile,
            max_neighbors: cfg.tracker.max_neighbors,
            churn: if cfg.churn_active() {
                ChurnModel::new(cfg.churn.mean_online_s, cfg.churn.mean_offline_s)
            } else {
                ChurnModel::disabled()
            },
            latency_mobile: cfg.latency.mobile_s,
            latency_static: cfg.latency.static_s,
        }
    }

    fn hybrid(&self) -> bool {
        self.mode == Mode::Hybrid
    }
}

#[derive(Debug)]
struct Node {
    spec: NodeSpec,
    state: PeerState,
    online: bool,
    generation: u32,
    extra_mobile: Vec<PeerId>,
    rr_cursor: usize,
    /// Sources this peer refuses, until the given time.
    dropped: BTreeMap<PeerId, SimTime>,
    out_rate: u64,
    in_rate: u64,
    out_pairs: BTreeSet<PeerId>,
    congested: bool,
    held_at_leave: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairPlan {
    rate: u64,
    conns: u32,
    budget: Option<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    src: PeerId,
    dst: PeerId,
    rate: u64,
    start: SimTime,
    record: usize,
}

fn stream(cfg_seed: u64, run_seed: u64, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&cfg_seed.to_le_bytes());
    key[8..16].copy_from_slice(&run_seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

fn pair_key(a: PeerId, b: PeerId) -> (PeerId, PeerId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn join_ids(ids: impl IntoIterator<Item = PeerId>) -> String {
    ids.into_iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")
}

/// One simulation run over an owned swarm.
pub struct World {
    p: Params,
    seed: u64,
    nodes: Vec<Node>,
    tracker: Tracker,
    queue: EventQueue,
    rng: ChaCha8Rng,
    churn_rng: ChaCha8Rng,
    latency_rng: ChaCha8Rng,
    latencies: BTreeMap<(PeerId, PeerId), SimTime>,
    plan: BTreeMap<(PeerId, PeerId), PairPlan>,
    plan_by_dst: BTreeSet<(PeerId, PeerId)>,
    planned_out: Vec<usize>,
    transfers: BTreeMap<u64, Transfer>,
    next_transfer: u64,
    metrics: MetricsLog,
    delivered: u64,
    cancelled: u64,
    redundant: u64,
    last_sample_delivered: u64,
    next_sample: SimTime,
    leechers_left: usize,
    events: Option<Vec<String>>,
    trace: bool,
    checks: RunChecks,
}

/// Builds the scenario for `(cfg, mode, seed)` and runs it to the end.
pub fn run_scenario(cfg: &Config, mode: Mode, seed: u64, opts: RunOptions) -> Result<RunResult, RunError> {
    let world = World::new(cfg, mode, seed, opts)?;
    Ok(world.run()?)
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl From<RunError> for crate::error::Error {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::Sim(s) => s.into(),
        }
    }
}

impl World {
    pub fn new(cfg: &Config, mode: Mode, seed: u64, opts: RunOptions) -> Result<Self, ConfigError> {
        let mut rng = stream(cfg.scenario.rng_seed, seed, 0);
        let plan = build_scenario(cfg, mode, &mut rng)?;
        Ok(Self::from_plan(cfg, mode, seed, plan, opts))
    }

    /// Runs a hand-built scenario, e.g. a swarm with specific bandwidths.
    pub fn from_plan(cfg: &Config, mode: Mode, seed: u64, plan: ScenarioPlan, opts: RunOptions) -> Self {
        let p = Params::new(cfg, mode, plan.map.clone());
        let mut tp = TrackerParams::new(plan.map.num_pieces());
        tp.u_default = cfg.tracker.u_default;
        tp.budget_cap = cfg.tracker.budget_cap;
        tp.max_neighbors = cfg.tracker.max_neighbors;
        let nodes: Vec<Node> = plan
            .nodes
            .into_iter()
            .map(|spec| Node {
                state: PeerState::new(spec.id, spec.class, &plan.map, spec.seeder, spec.join_at, p.rate_window),
                spec,
                online: false,
                generation: 0,
                extra_mobile: Vec::new(),
                rr_cursor: 0,
                dropped: BTreeMap::new(),
                out_rate: 0,
                in_rate: 0,
                out_pairs: BTreeSet::new(),
                congested: false,
                held_at_leave: None,
            })
            .collect();
        let leechers_left = nodes.iter().filter(|n| !n.spec.seeder).count();
        let n = nodes.len();
        Self {
            seed,
            nodes,
            tracker: Tracker::new(tp),
            queue: EventQueue::new(),
            rng: stream(cfg.scenario.rng_seed, seed, 1),
            churn_rng: stream(cfg.scenario.rng_seed, seed, 2),
            latency_rng: stream(cfg.scenario.rng_seed, seed, 3),
            latencies: BTreeMap::new(),
            plan: BTreeMap::new(),
            plan_by_dst: BTreeSet::new(),
            planned_out: vec![0; n],
            transfers: BTreeMap::new(),
            next_transfer: 0,
            metrics: MetricsLog::default(),
            delivered: 0,
            cancelled: 0,
            redundant: 0,
            last_sample_delivered: 0,
            next_sample: SimTime::ZERO,
            leechers_left,
            events: opts.record_events.then(Vec::new),
            trace: opts.record_events || log_enabled!(Level::Debug),
            checks: RunChecks::default(),
            p,
        }
    }

    fn now(&self) -> SimTime {
        self.queue.now()
    }

    fn emit(&mut self, line: impl FnOnce() -> String) {
        if !self.trace {
            return;
        }
        let line = format!("{} {}", self.now(), line());
        debug!(target: "mobiswarm::events", "{line}");
        if let Some(ev) = self.events.as_mut() {
            ev.push(line);
        }
    }

    fn node(&self, p: PeerId) -> &Node {
        &self.nodes[p.index()]
    }

    fn node_mut(&mut self, p: PeerId) -> &mut Node {
        &mut self.nodes[p.index()]
    }

    fn two_mut(&mut self, a: PeerId, b: PeerId) -> (&mut Node, &mut Node) {
        let (i, j) = (a.index(), b.index());
        assert_ne!(i, j);
        if i < j {
            let (l, r) = self.nodes.split_at_mut(j);
            (&mut l[i], &mut r[0])
        } else {
            let (l, r) = self.nodes.split_at_mut(i);
            (&mut r[0], &mut l[j])
        }
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) -> Result<(), SimError> {
        self.queue.schedule(at, kind).map(|_| ())
    }

    pub fn run(mut self) -> Result<RunResult, SimError> {
        for i in 0..self.nodes.len() {
            let (at, id) = (self.nodes[i].spec.join_at, self.nodes[i].spec.id);
            self.schedule(at, EventKind::PeerJoin(id))?;
        }
        self.schedule(SimTime::ZERO, EventKind::ChokeTick)?;
        self.schedule(SimTime::ZERO, EventKind::OptimisticTick)?;

        let until = self.p.until;
        let mut completion = (self.leechers_left == 0).then_some(SimTime::ZERO);
        let mut end = SimTime::ZERO;
        while completion.is_none() {
            let Some(t) = self.queue.peek_time() else {
                end = self.now();
                break;
            };
            if t > until {
                end = until;
                break;
            }
            self.sample_before(t);
            let ev = self.queue.pop().expect("peeked");
            self.handle(ev.kind)?;
            end = self.now();
            if self.leechers_left == 0 {
                completion = Some(self.now());
            }
        }
        if completion.is_none() {
            end = end.max(until.min(self.queue.peek_time().unwrap_or(until)));
        }
        while self.next_sample <= until {
            let t = self.next_sample;
            self.take_sample(t);
        }
        for tr in self.transfers.values() {
            self.metrics.records[tr.record].outcome = Outcome::Pending;
        }
        if let Some(t) = completion {
            self.emit(|| format!("finished at {t}"));
        }
        let peers = self
            .nodes
            .iter()
            .map(|n| PeerOutcome {
                spec: n.spec.clone(),
                completed_at: if n.spec.seeder { None } else { n.state.completed_at },
                held_blocks: n.state.bitfield.held_blocks(),
                redundant: n.state.redundant,
            })
            .collect();
        Ok(RunResult {
            mode: self.p.mode,
            seed: self.seed,
            metrics: self.metrics,
            events: self.events,
            completion,
            end,
            peers,
            checks: self.checks,
            map: self.p.map,
        })
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::PeerJoin(p) => self.on_join(p),
            EventKind::Announce { peer, generation } => self.on_announce(peer, generation),
            EventKind::ChokeTick => self.on_choke_tick(),
            EventKind::OptimisticTick => self.on_optimistic_tick(),
            EventKind::BlockDelivered(id) => self.on_delivered(id),
            EventKind::PeerLeave(p) => self.on_leave(p),
            EventKind::PeerReturn(p) => self.on_return(p),
        }
    }

    // ---- sampling ----------------------------------------------------------

    fn sample_before(&mut self, t: SimTime) {
        while self.next_sample < t && self.next_sample <= self.p.until {
            let s = self.next_sample;
            self.take_sample(s);
        }
    }

    fn take_sample(&mut self, t: SimTime) {
        let window = self.delivered - self.last_sample_delivered;
        self.last_sample_delivered = self.delivered;
        let requested = self.metrics.request_count;
        let (served, n_mobile, seeder_ups) = self.mobile_service();
        let fraction = if n_mobile == 0 {
            0.0
        } else {
            served as f64 / n_mobile as f64
        };
        let bound = max_mobile_fraction(&seeder_ups, self.p.min_seed_rate, n_mobile, self.p.r_min_mobile);
        if fraction * 100.0 > bound + 1e-9 {
            self.checks.capacity_bound_violations += 1;
        }
        let allocated: u64 = self.plan.values().map(|pp| pp.rate).sum();
        self.metrics.samples.push(Sample {
            t,
            cumulative_blocks: self.delivered,
            throughput_window: if t == SimTime::ZERO {
                0.0
            } else {
                window as f64 / self.p.sample_interval.as_secs_f64()
            },
            sdr: if requested == 0 {
                1.0
            } else {
                self.delivered as f64 / requested as f64
            },
            mobile_served_fraction: fraction,
            max_mobile_pct: bound,
            allocated_up_kbps: allocated as f64 / 1024.0,
            requested,
            in_flight: self.transfers.len() as u64,
            cancelled: self.cancelled,
            redundant: self.redundant,
        });
        self.next_sample = t + self.p.sample_interval;
    }

    /// (mobile leechers served at `r_min_mobile` or better by an eligible
    /// seeder, online mobile leechers, uplinks of online seeders)
    fn mobile_service(&self) -> (usize, usize, Vec<u64>) {
        let is_waiting_mobile = |n: &Node| n.online && n.spec.class.is_mobile() && !n.state.is_seeder;
        let n_mobile = self.nodes.iter().filter(|n| is_waiting_mobile(n)).count();
        let ups: Vec<u64> = self
            .nodes
            .iter()
            .filter(|n| n.online && n.state.is_seeder)
            .map(|n| n.spec.bandwidth.up_rate())
            .collect();
        let served: BTreeSet<PeerId> = self
            .plan
            .iter()
            .filter(|(&(s, d), pp)| {
                let src = self.node(s);
                src.state.is_seeder
                    && eligible_for_mobile_seeding(src.spec.bandwidth.up_rate(), self.p.min_seed_rate)
                    && pp.rate >= self.p.r_min_mobile
                    && is_waiting_mobile(self.node(d))
            })
            .map(|(&(_, d), _)| d)
            .collect();
        (served.len(), n_mobile, ups)
    }

    // ---- membership --------------------------------------------------------

    fn pair_latency(&mut self, a: PeerId, b: PeerId) -> SimTime {
        let key = pair_key(a, b);
        if let Some(&l) = self.latencies.get(&key) {
            return l;
        }
        let mobile = self.node(a).spec.class.is_mobile() || self.node(b).spec.class.is_mobile();
        let dist = if mobile {
            self.p.latency_mobile
        } else {
            self.p.latency_static
        };
        let l = SimTime::from_secs_f64(dist.sample(&mut self.latency_rng));
        self.latencies.insert(key, l);
        l
    }

    fn link(&mut self, a: PeerId, b: PeerId) {
        let lat = self.pair_latency(a, b);
        let (na, nb) = self.two_mut(a, b);
        let bf_b = nb.state.bitfield.clone();
        let bf_a = na.state.bitfield.clone();
        na.state.add_neighbor(b, &bf_b, NeighborLink::new(nb.state.joined_at, lat));
        nb.state.add_neighbor(a, &bf_a, NeighborLink::new(na.state.joined_at, lat));
    }

    fn announce(&mut self, p: PeerId) -> Result<usize, SimError> {
        let now = self.now();
        let node = self.node(p);
        let req = AnnounceRequest {
            peer: p,
            class: node.spec.class,
            bandwidth: node.spec.bandwidth,
            congested: node.congested,
            have_count: node.state.bitfield.held_pieces(),
        };
        let resp = self.tracker.handle_announce(&req, now, &mut self.rng)?;
        // Outbound links stop at the table size; inbound ones may go to twice that.
        let max = self.p.max_neighbors;
        let mut added = 0;
        for (n, _) in resp.neighbors {
            let other = self.node(n);
            let me = self.node(p);
            if !other.online
                || me.state.neighbors.contains_key(&n)
                || me.state.neighbors.len() >= max
                || other.state.neighbors.len() >= 2 * max
            {
                continue;
            }
            self.link(p, n);
            added += 1;
        }
        Ok(added)
    }

    fn schedule_announce(&mut self, p: PeerId) -> Result<(), SimError> {
        let at = self.now() + self.p.announce_interval;
        if at <= self.p.until {
            let generation = self.node(p).generation;
            self.schedule(at, EventKind::Announce { peer: p, generation })?;
        }
        Ok(())
    }

    fn schedule_churn(&mut self, p: PeerId) -> Result<(), SimError> {
        let now = self.now();
        let (class, online) = (self.node(p).spec.class, self.node(p).online);
        if let Some(at) = churn_step(&self.p.churn, class, online, now, &mut self.churn_rng) {
            if at <= self.p.until {
                let kind = if online {
                    EventKind::PeerLeave(p)
                } else {
                    EventKind::PeerReturn(p)
                };
                self.schedule(at, kind)?;
            }
        }
        Ok(())
    }

    fn on_join(&mut self, p: PeerId) -> Result<(), SimError> {
        self.node_mut(p).online = true;
        let added = self.announce(p)?;
        let class = self.node(p).spec.class;
        self.emit(|| format!("join {p} {class:?} neighbors {added}"));
        self.schedule_announce(p)?;
        self.schedule_churn(p)?;
        self.replan()
    }

    fn on_announce(&mut self, p: PeerId, generation: u32) -> Result<(), SimError> {
        let node = self.node(p);
        if !node.online || node.generation != generation {
            return Ok(());
        }
        let added = self.announce(p)?;
        self.emit(|| format!("announce {p} neighbors +{added}"));
        self.schedule_announce(p)
    }

    fn on_leave(&mut self, p: PeerId) -> Result<(), SimError> {
        if !self.node(p).online {
            return Ok(());
        }
        let now = self.now();
        let ids: Vec<u64> = self
            .transfers
            .iter()
            .filter(|(_, t)| t.src == p || t.dst == p)
            .map(|(&id, _)| id)
            .collect();
        for id in ids {
            let tr = self.transfers.remove(&id).expect("listed");
            self.release(&tr);
            let rec = &mut self.metrics.records[tr.record];
            rec.outcome = Outcome::Cancelled;
            rec.end = Some(now);
            let block = rec.block;
            self.cancelled += 1;
            let map = self.p.map.clone();
            self.node_mut(tr.dst).state.cancel_pending(&map, block);
            self.emit(|| format!("cancel {}->{} {block}", tr.src, tr.dst));
        }
        let neighbors: Vec<PeerId> = self.node(p).state.neighbors.keys().copied().collect();
        for n in neighbors {
            let (np, nn) = self.two_mut(p, n);
            let bf_p = np.state.bitfield.clone();
            let bf_n = nn.state.bitfield.clone();
            nn.state.remove_neighbor(p, &bf_p);
            np.state.remove_neighbor(n, &bf_n);
        }
        let node = self.node_mut(p);
        node.online = false;
        node.generation += 1;
        node.extra_mobile.clear();
        node.state.apply_choke_decision(&ChokeDecision::default());
        node.held_at_leave = Some(node.state.bitfield.held_blocks());
        self.tracker.mark_stopped(p)?;
        self.emit(|| format!("leave {p}"));
        self.schedule_churn(p)?;
        self.replan()
    }

    fn on_return(&mut self, p: PeerId) -> Result<(), SimError> {
        let node = self.node_mut(p);
        if node.online {
            return Ok(());
        }
        node.online = true;
        node.generation += 1;
        let held = node.state.bitfield.held_blocks();
        if let Some(before) = node.held_at_leave.take().filter(|&b| b != held) {
            return Err(SimError::Invariant(format!(
                "{p} left holding {before} blocks and returned with {held}"
            )));
        }
        let added = self.announce(p)?;
        self.emit(|| format!("return {p} neighbors {added}"));
        self.schedule_announce(p)?;
        self.schedule_churn(p)?;
        self.replan()
    }

    // ---- choking -----------------------------------------------------------

    fn dropped(&self, receiver: PeerId, source: PeerId) -> bool {
        self.node(receiver)
            .dropped
            .get(&source)
            .is_some_and(|&until| until > self.now())
    }

    /// Whether `d` currently wants data from `u`.
    fn wants(&self, d: PeerId, u: PeerId) -> bool {
        let n = self.node(d);
        n.online
            && !n.state.is_seeder
            && n.state.neighbors.get(&u).is_some_and(|l| l.interested)
            && !self.dropped(d, u)
    }

    fn may_serve(&self, u: PeerId, d: PeerId) -> bool {
        let n = self.node(u);
        !(self.p.hybrid()
            && n.state.is_seeder
            && n.spec.role == SeederRole::StaticOnly
            && self.node(d).spec.class.is_mobile())
    }

    fn candidates(&self, u: PeerId) -> Vec<PeerId> {
        self.node(u)
            .state
            .neighbors
            .keys()
            .copied()
            .filter(|&d| self.wants(d, u) && self.may_serve(u, d))
            .collect()
    }

    fn serves_extra_mobile(&self, u: PeerId) -> bool {
        let n = self.node(u);
        self.p.hybrid()
            && n.state.is_seeder
            && n.spec.role == SeederRole::ServesAll
            && eligible_for_mobile_seeding(n.spec.bandwidth.up_rate(), self.p.min_seed_rate)
    }

    fn refresh_choked_flags(&mut self, u: PeerId) {
        let serving: BTreeSet<PeerId> = {
            let n = self.node(u);
            n.state.upload_set().chain(n.extra_mobile.iter().copied()).collect()
        };
        let neighbors: Vec<PeerId> = self.node(u).state.neighbors.keys().copied().collect();
        for d in neighbors {
            let on = serving.contains(&d);
            if let Some(link) = self.node_mut(u).state.neighbors.get_mut(&d) {
                link.choked_by_us = !on;
            }
            if let Some(link) = self.node_mut(d).state.neighbors.get_mut(&u) {
                link.choking_us = !on;
            }
        }
    }

    fn on_choke_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        if self.p.hybrid() {
            self.drop_slow_sources();
        }
        for i in 0..self.nodes.len() {
            if !self.nodes[i].online {
                continue;
            }
            let u = self.nodes[i].spec.id;
            let cands = self.candidates(u);
            let decision = if self.p.rank_by_our && !self.nodes[i].state.is_seeder {
                let plan = &self.plan;
                recompute_chokes_by(
                    &self.nodes[i].state,
                    &cands,
                    |d| plan.get(&(d, u)).map_or(0, |pp| pp.rate),
                    self.p.regular_slots,
                    &mut self.rng,
                )
            } else {
                recompute_chokes(&self.nodes[i].state, &cands, now, self.p.regular_slots, &mut self.rng)
            };
            let extra = if self.serves_extra_mobile(u) {
                self.pick_extra_mobile(i, &cands, &decision)
            } else {
                Vec::new()
            };
            let node = &mut self.nodes[i];
            node.state.apply_choke_decision(&decision);
            node.extra_mobile = extra;
            self.refresh_choked_flags(u);
            if self.trace {
                let n = &self.nodes[i];
                let unchoked = join_ids(n.state.unchoked.iter().copied());
                let opt = n.state.optimistic.map_or("none".to_string(), |p| p.to_string());
                let extra = if n.extra_mobile.is_empty() {
                    String::new()
                } else {
                    format!(" extra [{}]", join_ids(n.extra_mobile.iter().copied()))
                };
                self.emit(|| format!("choke {u} [{unchoked}] opt {opt}{extra}"));
            }
        }
        let next = now + self.p.choke_interval;
        if next <= self.p.until {
            self.schedule(next, EventKind::ChokeTick)?;
        }
        self.replan()
    }

    /// Additional mobile destinations for a hybrid seeder, up to one per
    /// `r_min_mobile` of uplink in total.
    fn pick_extra_mobile(&mut self, i: usize, cands: &[PeerId], decision: &ChokeDecision) -> Vec<PeerId> {
        let limit = (self.nodes[i].spec.bandwidth.up_rate() / self.p.r_min_mobile) as usize;
        let room = limit.saturating_sub(decision.len());
        let mut pool: Vec<PeerId> = cands
            .iter()
            .copied()
            .filter(|&d| {
                self.node(d).spec.class.is_mobile()
                    && !decision.unchoked.contains(&d)
                    && decision.optimistic != Some(d)
            })
            .collect();
        if room == 0 || pool.is_empty() {
            return Vec::new();
        }
        if self.p.rotate_mobile {
            let node = &mut self.nodes[i];
            let start = node.rr_cursor % pool.len();
            pool.rotate_left(start);
            pool.truncate(room);
            node.rr_cursor = start + pool.len();
            pool.sort();
            pool
        } else {
            pool.shuffle(&mut self.rng);
            pool.truncate(room);
            pool.sort();
            pool
        }
    }

    fn on_optimistic_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let hybrid = self.p.hybrid();
        for i in 0..self.nodes.len() {
            if !self.nodes[i].online {
                continue;
            }
            let u = self.nodes[i].spec.id;
            let cands: Vec<OptimisticCandidate> = self
                .candidates(u)
                .into_iter()
                .map(|d| OptimisticCandidate {
                    peer: d,
                    class: self.node(d).spec.class,
                    is_seeder: self.node(d).state.is_seeder,
                })
                .collect();
            let pick = optimistic_unchoke(&self.nodes[i].state, &cands, hybrid, &mut self.rng);
            if let Some(d) = pick {
                self.checks.optimistic_picks += 1;
                let target = self.node(d);
                if hybrid && target.state.is_seeder && target.spec.class == PeerClass::Static {
                    self.checks.optimistic_static_seeder += 1;
                }
            }
            let node = &mut self.nodes[i];
            let decision = ChokeDecision {
                unchoked: node.state.unchoked.clone(),
                optimistic: pick,
            };
            node.state.apply_choke_decision(&decision);
            node.extra_mobile.retain(|&d| Some(d) != pick);
            self.refresh_choked_flags(u);
            let shown = pick.map_or("none".to_string(), |p| p.to_string());
            self.emit(|| format!("optimistic {u} -> {shown}"));
        }
        let next = now + self.p.optimistic_interval;
        if next <= self.p.until {
            self.schedule(next, EventKind::OptimisticTick)?;
        }
        self.replan()
    }

    /// Mobile leechers stop requesting from sources whose recent blocks were
    /// too slow, keeping at least one source.
    fn drop_slow_sources(&mut self) {
        let now = self.now();
        let window = self.p.rate_window;
        for i in 0..self.nodes.len() {
            self.nodes[i].dropped.retain(|_, &mut until| until > now);
            let node_ref = &self.nodes[i];
            if !node_ref.online || !node_ref.spec.class.is_mobile() || node_ref.state.is_seeder {
                continue;
            }
            let d = node_ref.spec.id;
            let sources: Vec<(PeerId, f64)> = self
                .plan_by_dst
                .range((d, PeerId(0))..=(d, PeerId(u32::MAX)))
                .map(|&(_, s)| {
                    let lat = node_ref
                        .state
                        .neighbors
                        .get(&s)
                        .and_then(|l| l.mean_latency(now, window))
                        .unwrap_or(0.0);
                    (s, lat)
                })
                .collect();
            let drops = drop_slow_sources(&sources, self.p.latency_threshold);
            if !sources.is_empty() && drops.len() >= sources.len() {
                self.checks.starved_by_drop += 1;
            }
            for s in drops {
                self.checks.drops += 1;
                self.nodes[i].dropped.insert(s, now + window);
                self.emit(|| format!("drop {d} x {s}"));
            }
        }
    }

    // ---- allocation --------------------------------------------------------

    fn upload_targets(&self, u: PeerId) -> Vec<PeerId> {
        let n = self.node(u);
        let mut out: Vec<PeerId> = Vec::new();
        for d in n.state.upload_set().chain(n.extra_mobile.iter().copied()) {
            if !out.contains(&d) && n.state.neighbors.contains_key(&d) && self.wants(d, u) && self.may_serve(u, d) {
                out.push(d);
            }
        }
        out
    }

    /// Recomputes every pair rate and starts whatever transfers now fit.
    fn replan(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let hybrid = self.p.hybrid();
        let params = PlanParams {
            min_seed_rate: self.p.min_seed_rate,
            u_default: self.p.u_default,
        };
        let n = self.nodes.len();
        let mut plan: BTreeMap<(PeerId, PeerId), PairPlan> = BTreeMap::new();
        let mut hybrid_seeders: Vec<(PeerId, Vec<PeerId>)> = Vec::new();

        for i in 0..n {
            if !self.nodes[i].online {
                continue;
            }
            let u = self.nodes[i].spec.id;
            let dests = self.upload_targets(u);
            if dests.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let up = node.spec.bandwidth.up_rate();
            if node.state.is_seeder {
                if hybrid {
                    hybrid_seeders.push((u, dests));
                    continue;
                }
                let targets: Vec<PlanTarget> = dests
                    .iter()
                    .map(|&d| PlanTarget {
                        peer: d,
                        class: self.node(d).spec.class,
                        budget: ConnectionBudget {
                            max_connections: self.p.u_default,
                        },
                        downlink_cap: None,
                    })
                    .collect();
                let up_plan = plan_uploads(up, &targets, Mode::Baseline, params);
                if up_plan.destinations().len() > self.p.u_default as usize {
                    self.checks.baseline_slot_violations += 1;
                }
                for (d, (rate, conns)) in up_plan.per_dest() {
                    plan.insert((u, d), PairPlan { rate, conns, budget: None });
                }
            } else {
                let each = up / dests.len() as u64;
                for &d in &dests {
                    let f = warmup_factor(self.node(d).state.joined_at, now, self.p.trial_len, self.p.warmup_min);
                    let rate = (each as f64 * f).floor() as u64;
                    if rate > 0 {
                        plan.insert((u, d), PairPlan { rate, conns: 1, budget: None });
                    }
                }
            }
        }

        // Downlink sharing at mobile peers, before hybrid seeders fill the rest.
        let mut inflow = vec![0u64; n];
        for (&(_, d), pp) in &plan {
            inflow[d.index()] += pp.rate;
        }
        let mut congestion_changes = Vec::new();
        for i in 0..n {
            let node = &self.nodes[i];
            if !node.spec.class.is_mobile() {
                continue;
            }
            let down = node.spec.bandwidth.down_rate();
            if hybrid && !node.state.is_seeder && node.online {
                let congested = inflow[i] > down;
                if congested != node.congested {
                    congestion_changes.push((node.spec.id, congested));
                }
            }
        }
        for (p, c) in congestion_changes {
            self.node_mut(p).congested = c;
            self.tracker.signal_congestion(p, c)?;
            self.emit(|| format!("congestion {p} {c}"));
        }
        scale_into(&mut plan, &mut inflow, &self.nodes, |n| n.spec.class.is_mobile());

        for (u, dests) in hybrid_seeders {
            let up = self.node(u).spec.bandwidth.up_rate();
            let mut targets = Vec::with_capacity(dests.len());
            for d in dests {
                let dn = self.node(d);
                let budget = self.tracker.budget(u, d)?;
                // A mobile downlink with less than the minimum useful rate left is not served.
                let downlink_cap = dn.spec.class.is_mobile().then(|| {
                    let left = dn.spec.bandwidth.down_rate().saturating_sub(inflow[d.index()]);
                    if left < self.p.r_min_mobile {
                        0
                    } else {
                        left
                    }
                });
                targets.push(PlanTarget {
                    peer: d,
                    class: dn.spec.class,
                    budget,
                    downlink_cap,
                });
            }
            let up_plan = plan_uploads(up, &targets, Mode::Hybrid, params);
            for (d, (rate, conns)) in up_plan.per_dest() {
                let budget = targets
                    .iter()
                    .find(|t| t.peer == d)
                    .map(|t| t.budget.max_connections)
                    .expect("planned destination was a target");
                if conns > budget {
                    self.checks.budget_violations += 1;
                }
                inflow[d.index()] += rate;
                plan.insert(
                    (u, d),
                    PairPlan {
                        rate,
                        conns,
                        budget: Some(budget),
                    },
                );
            }
        }

        // Static downlinks are shared among every inbound flow.
        scale_into(&mut plan, &mut inflow, &self.nodes, |n| !n.spec.class.is_mobile());
        plan.retain(|_, pp| pp.rate > 0);

        self.checks.plans += 1;
        let mut out = vec![0u64; n];
        let mut into = vec![0u64; n];
        for (&(s, d), pp) in &plan {
            out[s.index()] += pp.rate;
            into[d.index()] += pp.rate;
        }
        for i in 0..n {
            let bw = self.nodes[i].spec.bandwidth;
            if out[i] > bw.up_rate() {
                self.checks.uplink_violations += 1;
            }
            if into[i] > bw.down_rate() {
                self.checks.downlink_violations += 1;
            }
        }

        self.planned_out = vec![0; n];
        for &(s, _) in plan.keys() {
            self.planned_out[s.index()] += 1;
        }
        self.plan_by_dst = plan.keys().map(|&(s, d)| (d, s)).collect();
        self.plan = plan;

        let pairs: Vec<(PeerId, PeerId)> = self.plan.keys().copied().collect();
        for (s, d) in pairs {
            self.try_start(s, d)?;
        }
        Ok(())
    }

    fn try_start(&mut self, u: PeerId, d: PeerId) -> Result<(), SimError> {
        let Some(&pp) = self.plan.get(&(u, d)) else {
            return Ok(());
        };
        let (src, dst) = (&self.nodes[u.index()], &self.nodes[d.index()]);
        if !src.online
            || !dst.online
            || dst.state.is_seeder
            || src.out_pairs.contains(&d)
            || src.out_pairs.len() >= self.planned_out[u.index()]
            || src.out_rate + pp.rate > src.spec.bandwidth.up_rate()
            || dst.in_rate + pp.rate > dst.spec.bandwidth.down_rate()
        {
            return Ok(());
        }
        let Some(block) = crate::protocol::select_next_block(&dst.state, &self.p.map, &src.state.bitfield, &mut self.rng)
        else {
            return Ok(());
        };
        let now = self.now();
        let latency = self.node(d).state.neighbors.get(&u).map_or(SimTime::ZERO, |l| l.base_latency);
        let bytes = self.p.map.block_bytes(block);
        let duration = transfer_time(bytes, pp.rate, latency).ok_or(SimError::ZeroRate { src: u, dst: d })?;
        let source_seeder = self.node(u).state.is_seeder;
        let dest_class = self.node(d).spec.class;
        let map = self.p.map.clone();
        self.node_mut(d).state.add_pending(&map, block, u);
        self.metrics.records.push(BlockTransferRecord {
            block,
            source: u,
            dest: d,
            dest_class,
            source_seeder,
            bytes,
            t0: now,
            tx: None,
            end: None,
            outcome: Outcome::Pending,
            rate: pp.rate,
            connections: pp.conns,
            budget: pp.budget,
            base_latency: latency,
        });
        self.metrics.request_count += 1;
        let id = self.next_transfer;
        self.next_transfer += 1;
        self.transfers.insert(
            id,
            Transfer {
                src: u,
                dst: d,
                rate: pp.rate,
                start: now,
                record: self.metrics.records.len() - 1,
            },
        );
        self.schedule(now + duration, EventKind::BlockDelivered(id))?;
        let (ns, nd) = self.two_mut(u, d);
        ns.out_rate += pp.rate;
        ns.out_pairs.insert(d);
        nd.in_rate += pp.rate;
        let rate = pp.rate;
        self.emit(|| format!("request {u}->{d} {block} rate {rate}"));
        Ok(())
    }

    fn release(&mut self, tr: &Transfer) {
        let (ns, nd) = self.two_mut(tr.src, tr.dst);
        ns.out_rate -= tr.rate;
        ns.out_pairs.remove(&tr.dst);
        nd.in_rate -= tr.rate;
    }

    fn kick_around(&mut self, u: PeerId, d: PeerId) -> Result<(), SimError> {
        let out: Vec<PeerId> = self
            .plan
            .range((u, PeerId(0))..=(u, PeerId(u32::MAX)))
            .map(|(&(_, x), _)| x)
            .collect();
        for x in out {
            self.try_start(u, x)?;
        }
        let inbound: Vec<PeerId> = self
            .plan_by_dst
            .range((d, PeerId(0))..=(d, PeerId(u32::MAX)))
            .map(|&(_, s)| s)
            .collect();
        for s in inbound {
            self.try_start(s, d)?;
        }
        Ok(())
    }

    fn on_delivered(&mut self, id: u64) -> Result<(), SimError> {
        let Some(tr) = self.transfers.remove(&id) else {
            return Ok(());
        };
        self.release(&tr);
        let now = self.now();
        let (u, d) = (tr.src, tr.dst);
        let block: BlockId = self.metrics.records[tr.record].block;
        let bytes = self.metrics.records[tr.record].bytes;
        let map = self.p.map.clone();
        let result = handle_block_received(&mut self.node_mut(d).state, &map, u, block, now);
        let rec = &mut self.metrics.records[tr.record];
        rec.end = Some(now);
        let rx = match result {
            Ok(rx) => rx,
            Err(_) => {
                rec.outcome = Outcome::Redundant;
                self.redundant += 1;
                self.emit(|| format!("redundant {u}->{d} {block}"));
                return self.kick_around(u, d);
            }
        };
        rec.outcome = Outcome::Delivered;
        rec.tx = Some(now);
        self.delivered += 1;
        self.node_mut(d).state.record_latency(u, now, now - tr.start);
        self.node_mut(u).state.record_sent(d, now, bytes);
        self.emit(|| format!("deliver {u}->{d} {block}"));

        if let Some(piece) = rx.piece_completed {
            let bf = self.node(d).state.bitfield.clone();
            let neighbors: Vec<PeerId> = self.node(d).state.neighbors.keys().copied().collect();
            let interest: Vec<(PeerId, bool)> = neighbors
                .iter()
                .map(|&n| (n, bf.lacks_any_of(&self.node(n).state.bitfield)))
                .collect();
            for (n, wants) in interest {
                if let Some(link) = self.node_mut(d).state.neighbors.get_mut(&n) {
                    link.interested = wants;
                }
            }
            for &n in &rx.have_to {
                self.node_mut(n).state.on_have(d, piece, &bf);
            }
            let k = rx.have_to.len();
            self.emit(|| format!("have {d} piece {piece} to {k}"));
        }
        if rx.file_completed {
            self.leechers_left -= 1;
            self.emit(|| format!("complete {d}"));
            self.announce(d)?;
        }
        if rx.piece_completed.is_some() {
            self.replan()
        } else {
            self.kick_around(u, d)
        }
    }
}

/// Scales flows into every selected destination whose inbound sum exceeds
/// its downlink, proportionally and rounding down.
fn scale_into(
    plan: &mut BTreeMap<(PeerId, PeerId), PairPlan>,
    inflow: &mut [u64],
    nodes: &[Node],
    select: impl Fn(&Node) -> bool,
) {
    let over: Vec<Option<(u64, u64)>> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let down = n.spec.bandwidth.down_rate();
            (select(n) && inflow[i] > down).then_some((down, inflow[i]))
        })
        .collect();
    for (&(_, d), pp) in plan.iter_mut() {
        if let Some((down, total)) = over[d.index()] {
            let scaled = (u128::from(pp.rate) * u128::from(down) / u128::from(total)) as u64;
            inflow[d.index()] -= pp.rate - scaled;
            pp.rate = scaled;
        }
    }
}
