use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::SimError;
use crate::swarm::PeerId;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    PeerJoin(PeerId),
    /// `generation` invalidates announces scheduled before a departure.
    Announce { peer: PeerId, generation: u32 },
    ChokeTick,
    OptimisticTick,
    BlockDelivered(u64),
    PeerLeave(PeerId),
    PeerReturn(PeerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

/// Min-queue ordered by `(time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, SimError> {
        if time < self.now {
            return Err(SimError::Causality { now: self.now, at: time });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { time, seq, kind }));
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.time;
        Some(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_queue_yields_nothing() {
        let mut q = EventQueue::new();
        assert!(q.pop().is_none());
        assert_eq!(q.now(), SimTime::ZERO);
    }

    #[test]
    fn equal_times_keep_insertion_order() {
        let mut q = EventQueue::new();
        let t = SimTime::from_secs(3);
        q.schedule(t, EventKind::OptimisticTick).unwrap();
        q.schedule(t, EventKind::ChokeTick).unwrap();
        q.schedule(SimTime::from_secs(1), EventKind::PeerJoin(PeerId(4))).unwrap();
        let order: Vec<EventKind> = std::iter::from_fn(|| q.pop().map(|e| e.kind)).collect();
        assert_eq!(
            order,
            [EventKind::PeerJoin(PeerId(4)), EventKind::OptimisticTick, EventKind::ChokeTick]
        );
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(5), EventKind::ChokeTick).unwrap();
        q.pop();
        let err = q.schedule(SimTime::from_secs(4), EventKind::ChokeTick).unwrap_err();
        assert!(matches!(err, SimError::Causality { .. }));
    }
}
