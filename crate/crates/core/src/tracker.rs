//! Centralized tracker with peer-type tables and per-destination connection
//! budgets.
//!
//! Seeders serving a static peer get the protocol default of `u_default`
//! connections. Toward a mobile peer the budget scales with how far the
//! seeder's uplink exceeds the destination's downlink, clamped to
//! `[1, budget_cap]`. A peer that reports a congested downlink gets half its
//! normal budget.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::TrackerError;
use crate::swarm::{Bandwidth, PeerClass, PeerId};
use crate::time::SimTime;

pub const DEFAULT_U: u32 = 5;
pub const DEFAULT_BUDGET_CAP: u32 = 32;
pub const DEFAULT_MAX_NEIGHBORS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub peer: PeerId,
    pub class: PeerClass,
    pub bandwidth: Bandwidth,
    pub index: usize,
    pub last_announce: SimTime,
    pub congested: bool,
    pub is_seeder: bool,
    /// Cleared when the peer leaves the swarm; inactive peers are never handed out.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnounceRequest {
    pub peer: PeerId,
    pub class: PeerClass,
    pub bandwidth: Bandwidth,
    pub congested: bool,
    pub have_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnounceResponse {
    pub neighbors: Vec<(PeerId, PeerClass)>,
    pub budgets: BTreeMap<PeerId, ConnectionBudget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConnectionBudget {
    pub max_connections: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackerParams {
    pub u_default: u32,
    pub budget_cap: u32,
    pub max_neighbors: usize,
    pub num_pieces: u32,
}

impl TrackerParams {
    pub fn new(num_pieces: u32) -> Self {
        Self {
            u_default: DEFAULT_U,
            budget_cap: DEFAULT_BUDGET_CAP,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            num_pieces,
        }
    }
}

/// Number of simultaneous upload connections `seeder` may open toward `dest`.
pub fn connection_budget(
    seeder: &PeerRecord,
    dest: &PeerRecord,
    u_default: u32,
    budget_cap: u32,
) -> ConnectionBudget {
    let base = match dest.class {
        PeerClass::Static => u_default,
        PeerClass::Mobile => {
            let ratio = seeder.bandwidth.up_rate() / dest.bandwidth.down_rate();
            ratio.clamp(1, u64::from(budget_cap.max(1))) as u32
        }
    };
    let max_connections = if dest.congested {
        (base / 2).max(1)
    } else {
        base.max(1)
    };
    ConnectionBudget { max_connections }
}

#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackerParams,
    records: Vec<PeerRecord>,
    by_peer: BTreeMap<PeerId, usize>,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            records: Vec::new(),
            by_peer: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, peer: PeerId) -> Option<&PeerRecord> {
        self.by_peer.get(&peer).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[PeerRecord] {
        &self.records
    }

    /// Registers or refreshes a peer and returns a uniform sample of other
    /// active peers together with the budgets of any seeders among them.
    pub fn handle_announce<R: Rng + ?Sized>(
        &mut self,
        req: &AnnounceRequest,
        now: SimTime,
        rng: &mut R,
    ) -> Result<AnnounceResponse, TrackerError> {
        let is_seeder = req.have_count >= self.params.num_pieces;
        let idx = match self.by_peer.get(&req.peer) {
            Some(&i) => {
                let rec = &mut self.records[i];
                if rec.class != req.class {
                    return Err(TrackerError::ClassChanged {
                        peer: req.peer,
                        registered: rec.class,
                        announced: req.class,
                    });
                }
                rec.last_announce = rec.last_announce.max(now);
                rec.congested = req.congested;
                rec.is_seeder = is_seeder;
                rec.bandwidth = req.bandwidth;
                rec.active = true;
                i
            }
            None => {
                let i = self.records.len();
                self.records.push(PeerRecord {
                    peer: req.peer,
                    class: req.class,
                    bandwidth: req.bandwidth,
                    index: i,
                    last_announce: now,
                    congested: req.congested,
                    is_seeder,
                    active: true,
                });
                self.by_peer.insert(req.peer, i);
                i
            }
        };

        let others: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.active && r.index != idx)
            .map(|r| r.index)
            .collect();
        let take = others.len().min(self.params.max_neighbors);
        let mut picked: Vec<usize> = index::sample(rng, others.len(), take)
            .into_iter()
            .map(|i| others[i])
            .collect();
        picked.sort_unstable();

        let me = &self.records[idx];
        let mut budgets = BTreeMap::new();
        let neighbors = picked
            .into_iter()
            .map(|i| {
                let r = &self.records[i];
                if r.is_seeder {
                    budgets.insert(
                        r.peer,
                        connection_budget(r, me, self.params.u_default, self.params.budget_cap),
                    );
                }
                (r.peer, r.class)
            })
            .collect();
        Ok(AnnounceResponse { neighbors, budgets })
    }

    pub fn signal_congestion(&mut self, peer: PeerId, congested: bool) -> Result<(), TrackerError> {
        let &i = self.by_peer.get(&peer).ok_or(TrackerError::UnknownPeer(peer))?;
        self.records[i].congested = congested;
        Ok(())
    }

    /// Marks a peer as departed. Its record and index are kept.
    pub fn mark_stopped(&mut self, peer: PeerId) -> Result<(), TrackerError> {
        let &i = self.by_peer.get(&peer).ok_or(TrackerError::UnknownPeer(peer))?;
        self.records[i].active = false;
        Ok(())
    }

    /// Budget `seeder` currently holds toward `dest` under the live table.
    pub fn budget(&self, seeder: PeerId, dest: PeerId) -> Result<ConnectionBudget, TrackerError> {
        let s = self.record(seeder).ok_or(TrackerError::UnknownPeer(seeder))?;
        let d = self.record(dest).ok_or(TrackerError::UnknownPeer(dest))?;
        Ok(connection_budget(s, d, self.params.u_default, self.params.budget_cap))
    }
}
