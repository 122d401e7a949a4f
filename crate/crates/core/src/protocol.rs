//! Per-peer protocol state: interest, tit-for-tat choking, optimistic
//! unchoking, piece/block selection and the trial period granted to
//! newcomers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::swarm::{rarest_order_by_counts, Bitfield, BlockId, FileMap, PeerClass, PeerId};
use crate::time::SimTime;

/// Byte counts observed on a link, kept for a sliding window.
#[derive(Debug, Clone, Default)]
pub struct RateWindow {
    samples: VecDeque<(SimTime, u64)>,
}

impl RateWindow {
    pub fn record(&mut self, now: SimTime, bytes: u64, retain: SimTime) {
        self.samples.push_back((now, bytes));
        let horizon = now.saturating_sub(retain);
        while self.samples.front().is_some_and(|&(t, _)| t < horizon) {
            self.samples.pop_front();
        }
    }

    /// Bytes recorded in `(now - window, now]`.
    pub fn bytes_in(&self, now: SimTime, window: SimTime) -> u64 {
        let horizon = now.saturating_sub(window);
        self.samples
            .iter()
            .rev()
            .take_while(|&&(t, _)| t > horizon || (window >= now && t >= horizon))
            .map(|&(_, b)| b)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct NeighborLink {
    pub choked_by_us: bool,
    pub choking_us: bool,
    /// We want something this neighbor has.
    pub interested: bool,
    pub neighbor_joined_at: SimTime,
    pub base_latency: SimTime,
    received: RateWindow,
    sent: RateWindow,
    /// (delivery time, block latency) of blocks received from this neighbor.
    latencies: VecDeque<(SimTime, SimTime)>,
}

impl NeighborLink {
    pub fn new(neighbor_joined_at: SimTime, base_latency: SimTime) -> Self {
        Self {
            choked_by_us: true,
            choking_us: true,
            interested: false,
            neighbor_joined_at,
            base_latency,
            received: RateWindow::default(),
            sent: RateWindow::default(),
            latencies: VecDeque::new(),
        }
    }

    pub fn received_in(&self, now: SimTime, window: SimTime) -> u64 {
        self.received.bytes_in(now, window)
    }

    pub fn sent_in(&self, now: SimTime, window: SimTime) -> u64 {
        self.sent.bytes_in(now, window)
    }

    /// Mean latency of blocks delivered by this neighbor in the window.
    pub fn mean_latency(&self, now: SimTime, window: SimTime) -> Option<f64> {
        let horizon = now.saturating_sub(window);
        let (n, sum) = self
            .latencies
            .iter()
            .filter(|&&(t, _)| t > horizon)
            .fold((0u64, 0u64), |(n, s), &(_, l)| (n + 1, s + l.as_millis()));
        (n > 0).then(|| sum as f64 / n as f64 / 1000.0)
    }
}

#[derive(Debug, Clone)]
pub struct PeerState {
    pub id: PeerId,
    pub class: PeerClass,
    pub bitfield: Bitfield,
    pub neighbors: BTreeMap<PeerId, NeighborLink>,
    /// Replica count of each piece among current neighbors.
    pub availability: Vec<u32>,
    pending: BTreeMap<BlockId, PeerId>,
    requested: Vec<bool>,
    pub joined_at: SimTime,
    pub completed_at: Option<SimTime>,
    pub is_seeder: bool,
    pub redundant: u64,
    pub unchoked: BTreeSet<PeerId>,
    pub optimistic: Option<PeerId>,
    rate_window: SimTime,
}

impl PeerState {
    pub fn new(id: PeerId, class: PeerClass, map: &FileMap, full: bool, joined_at: SimTime, rate_window: SimTime) -> Self {
        let bitfield = if full {
            Bitfield::full(map)
        } else {
            Bitfield::empty(map)
        };
        Self {
            id,
            class,
            bitfield,
            neighbors: BTreeMap::new(),
            availability: vec![0; map.num_pieces() as usize],
            pending: BTreeMap::new(),
            requested: vec![false; map.total_blocks() as usize],
            joined_at,
            completed_at: full.then_some(joined_at),
            is_seeder: full,
            redundant: 0,
            unchoked: BTreeSet::new(),
            optimistic: None,
            rate_window,
        }
    }

    pub fn rate_window(&self) -> SimTime {
        self.rate_window
    }

    pub fn add_neighbor(&mut self, peer: PeerId, their_bitfield: &Bitfield, link: NeighborLink) -> bool {
        if self.neighbors.contains_key(&peer) || peer == self.id {
            return false;
        }
        for p in 0..their_bitfield.num_pieces() {
            if their_bitfield.has_piece(p) {
                self.availability[p as usize] += 1;
            }
        }
        let mut link = link;
        link.interested = self.bitfield.lacks_any_of(their_bitfield);
        self.neighbors.insert(peer, link);
        true
    }

    pub fn remove_neighbor(&mut self, peer: PeerId, their_bitfield: &Bitfield) -> Option<NeighborLink> {
        let link = self.neighbors.remove(&peer)?;
        for p in 0..their_bitfield.num_pieces() {
            if their_bitfield.has_piece(p) {
                self.availability[p as usize] -= 1;
            }
        }
        self.unchoked.remove(&peer);
        if self.optimistic == Some(peer) {
            self.optimistic = None;
        }
        Some(link)
    }

    /// A neighbor announced a newly completed piece.
    pub fn on_have(&mut self, from: PeerId, piece: u32, their_bitfield: &Bitfield) {
        if let Some(link) = self.neighbors.get_mut(&from) {
            self.availability[piece as usize] += 1;
            link.interested = self.bitfield.lacks_any_of(their_bitfield);
        }
    }

    pub fn is_interested_in(&self, their_bitfield: &Bitfield) -> bool {
        self.bitfield.lacks_any_of(their_bitfield)
    }

    pub fn pending(&self) -> &BTreeMap<BlockId, PeerId> {
        &self.pending
    }

    pub fn is_requested(&self, map: &FileMap, block: BlockId) -> bool {
        self.requested[map.block_index(block)]
    }

    pub fn add_pending(&mut self, map: &FileMap, block: BlockId, from: PeerId) {
        assert!(
            !self.bitfield.has_block(map, block),
            "{} requested block {block} it already holds",
            self.id
        );
        let idx = map.block_index(block);
        assert!(!self.requested[idx], "{} double-requested {block}", self.id);
        self.requested[idx] = true;
        self.pending.insert(block, from);
    }

    /// Forgets a request that will never be delivered.
    pub fn cancel_pending(&mut self, map: &FileMap, block: BlockId) -> Option<PeerId> {
        let from = self.pending.remove(&block)?;
        self.requested[map.block_index(block)] = false;
        Some(from)
    }

    pub fn record_sent(&mut self, to: PeerId, now: SimTime, bytes: u64) {
        let retain = self.rate_window;
        if let Some(link) = self.neighbors.get_mut(&to) {
            link.sent.record(now, bytes, retain);
        }
    }

    pub fn record_latency(&mut self, from: PeerId, now: SimTime, latency: SimTime) {
        let horizon = now.saturating_sub(self.rate_window);
        if let Some(link) = self.neighbors.get_mut(&from) {
            link.latencies.push_back((now, latency));
            while link.latencies.front().is_some_and(|&(t, _)| t <= horizon) {
                link.latencies.pop_front();
            }
        }
    }

    pub fn apply_choke_decision(&mut self, decision: &ChokeDecision) {
        self.unchoked = decision.unchoked.clone();
        self.optimistic = decision.optimistic;
        for (peer, link) in self.neighbors.iter_mut() {
            link.choked_by_us = !(decision.unchoked.contains(peer) || decision.optimistic == Some(*peer));
        }
    }

    /// Every peer this peer currently uploads to, regular slots first.
    pub fn upload_set(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.unchoked.iter().copied().chain(self.optimistic)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChokeDecision {
    pub unchoked: BTreeSet<PeerId>,
    pub optimistic: Option<PeerId>,
}

impl ChokeDecision {
    pub fn len(&self) -> usize {
        self.unchoked.len() + usize::from(self.optimistic.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks the `slots` highest-keyed peers; equal keys are ordered by a seeded
/// shuffle.
pub fn rank_top<R: Rng + ?Sized>(mut keyed: Vec<(PeerId, u64)>, slots: usize, rng: &mut R) -> Vec<PeerId> {
    keyed.shuffle(rng);
    keyed.sort_by_key(|k| std::cmp::Reverse(k.1));
    keyed.into_iter().take(slots).map(|(p, _)| p).collect()
}

/// Ranking keys used by the choker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChokeKey {
    /// Bytes received from the neighbor (tit-for-tat); seeders fall back to
    /// bytes sent to it.
    Reciprocal,
    /// Externally supplied observed upload rates.
    Observed,
}

/// Regular unchoke set: the top `regular_slots` candidates by bytes received
/// from them over the rate window (bytes sent to them when seeding). The
/// current optimistic peer keeps its slot and is not ranked.
pub fn recompute_chokes<R: Rng + ?Sized>(
    state: &PeerState,
    candidates: &[PeerId],
    now: SimTime,
    regular_slots: usize,
    rng: &mut R,
) -> ChokeDecision {
    let window = state.rate_window;
    let keyed = candidates
        .iter()
        .filter(|&&p| Some(p) != state.optimistic)
        .filter_map(|&p| {
            let link = state.neighbors.get(&p)?;
            let key = if state.is_seeder {
                link.sent_in(now, window)
            } else {
                link.received_in(now, window)
            };
            Some((p, key))
        })
        .collect();
    decide(state, candidates, keyed, regular_slots, rng)
}

/// Same as [`recompute_chokes`] with caller-provided ranking keys, e.g.
/// observed upload rates.
pub fn recompute_chokes_by<R: Rng + ?Sized>(
    state: &PeerState,
    candidates: &[PeerId],
    key: impl Fn(PeerId) -> u64,
    regular_slots: usize,
    rng: &mut R,
) -> ChokeDecision {
    let keyed = candidates
        .iter()
        .filter(|&&p| Some(p) != state.optimistic && state.neighbors.contains_key(&p))
        .map(|&p| (p, key(p)))
        .collect();
    decide(state, candidates, keyed, regular_slots, rng)
}

fn decide<R: Rng + ?Sized>(
    state: &PeerState,
    candidates: &[PeerId],
    keyed: Vec<(PeerId, u64)>,
    regular_slots: usize,
    rng: &mut R,
) -> ChokeDecision {
    let unchoked = rank_top(keyed, regular_slots, rng).into_iter().collect();
    let optimistic = state.optimistic.filter(|p| candidates.contains(p));
    ChokeDecision { unchoked, optimistic }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimisticCandidate {
    pub peer: PeerId,
    pub class: PeerClass,
    pub is_seeder: bool,
}

/// Uniform choice among interested candidates that are currently choked. In
/// hybrid mode static seeders are never picked: their rates are known from
/// the tracker so no discovery slot is spent on them.
pub fn optimistic_unchoke<R: Rng + ?Sized>(
    state: &PeerState,
    candidates: &[OptimisticCandidate],
    hybrid_mode: bool,
    rng: &mut R,
) -> Option<PeerId> {
    let pool: Vec<PeerId> = candidates
        .iter()
        .filter(|c| !state.unchoked.contains(&c.peer))
        .filter(|c| !(hybrid_mode && c.is_seeder && c.class == PeerClass::Static))
        .map(|c| c.peer)
        .collect();
    pool.choose(rng).copied()
}

/// Next block to request from `neighbor`.
///
/// Until the first piece completes, a random piece the neighbor holds is
/// chosen; afterwards pieces are taken rarest first. Either way a piece that
/// is already started wins over a fresh one. Within a piece the lowest-index
/// block that is neither held nor already requested wins.
pub fn select_next_block<R: Rng + ?Sized>(
    state: &PeerState,
    map: &FileMap,
    neighbor_bitfield: &Bitfield,
    rng: &mut R,
) -> Option<BlockId> {
    let own = &state.bitfield;
    let open_block = |piece: u32| {
        map.blocks_of(piece)
            .find(|&b| !own.has_block(map, b) && !state.requested[map.block_index(b)])
    };
    let started = |piece: u32| {
        map.blocks_of(piece)
            .any(|b| own.has_block(map, b) || state.requested[map.block_index(b)])
    };
    let usable = |piece: u32| neighbor_bitfield.has_piece(piece) && open_block(piece).is_some();
    let piece = if own.is_empty() {
        // strict priority: finish a started piece before opening another
        let pool: Vec<u32> = own.missing_pieces().filter(|&p| usable(p)).collect();
        match pool.iter().copied().find(|&p| started(p)) {
            Some(p) => p,
            None => *pool.choose(rng)?,
        }
    } else {
        let order = rarest_order_by_counts(&state.availability, own, rng);
        match order.iter().copied().find(|&p| started(p) && usable(p)) {
            Some(p) => p,
            None => order.into_iter().find(|&p| usable(p))?,
        }
    };
    open_block(piece)
}

/// Fraction of the normal per-connection rate granted to a neighbor that
/// joined at `neighbor_joined_at`: ramps linearly from `warmup_min` to 1 over
/// `trial_len`.
pub fn warmup_factor(neighbor_joined_at: SimTime, now: SimTime, trial_len: SimTime, warmup_min: f64) -> f64 {
    if trial_len == SimTime::ZERO {
        return 1.0;
    }
    let elapsed = now.saturating_sub(neighbor_joined_at).as_millis() as f64;
    let progress = (elapsed / trial_len.as_millis() as f64).min(1.0);
    warmup_min + (1.0 - warmup_min) * progress
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reception {
    pub piece_completed: Option<u32>,
    /// Neighbors that must be told about the completed piece.
    pub have_to: Vec<PeerId>,
    pub file_completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unsolicited {
    pub from: PeerId,
    pub block: BlockId,
}

/// Applies a delivered block. Blocks that were not requested from `from`
/// are discarded and counted as redundant.
pub fn handle_block_received(
    state: &mut PeerState,
    map: &FileMap,
    from: PeerId,
    block: BlockId,
    now: SimTime,
) -> Result<Reception, Unsolicited> {
    if state.pending.get(&block) != Some(&from) {
        state.redundant += 1;
        return Err(Unsolicited { from, block });
    }
    state.cancel_pending(map, block);
    let completed = state
        .bitfield
        .set_block(map, block)
        .expect("pending blocks are never held");
    let retain = state.rate_window;
    if let Some(link) = state.neighbors.get_mut(&from) {
        link.received.record(now, map.block_bytes(block), retain);
    }
    let mut reception = Reception {
        piece_completed: None,
        have_to: Vec::new(),
        file_completed: false,
    };
    if completed {
        reception.piece_completed = Some(block.piece);
        reception.have_to = state.neighbors.keys().copied().collect();
    }
    if state.bitfield.is_complete() && state.completed_at.is_none() {
        state.completed_at = Some(now);
        state.is_seeder = true;
        reception.file_completed = true;
    }
    Ok(reception)
}
