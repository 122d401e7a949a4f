//! Discrete-event engine: event queue, link timing, churn and the swarm world.

mod churn;
mod event;
mod scenario;
mod world;

pub use churn::{churn_step, ChurnModel};
pub use event::{Event, EventKind, EventQueue};
pub use scenario::{build_scenario, NodeSpec, ScenarioPlan, SeederRole};
pub use world::{run_scenario, PeerOutcome, RunChecks, RunError, RunOptions, RunResult, World};

use crate::time::SimTime;

/// Link model: base latency plus serialization at `rate`, rounded up to the
/// next millisecond. `None` for a zero rate, which must never be scheduled.
pub fn transfer_time(bytes: u64, rate: u64, base_latency: SimTime) -> Option<SimTime> {
    if rate == 0 {
        return None;
    }
    let ms = (u128::from(bytes) * 1000).div_ceil(u128::from(rate));
    Some(base_latency + SimTime::from_millis(ms as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_time_is_latency_plus_serialization() {
        let t = transfer_time(16_384, 16_384, SimTime::from_millis(100)).unwrap();
        assert_eq!(t, SimTime::from_millis(1_100));
        assert_eq!(transfer_time(0, 7, SimTime::from_millis(50)), Some(SimTime::from_millis(50)));
        assert_eq!(transfer_time(16_384, 0, SimTime::ZERO), None);
    }

    #[test]
    fn halving_rate_doubles_serialization() {
        let full = transfer_time(16_384, 8_192, SimTime::ZERO).unwrap();
        let half = transfer_time(16_384, 4_096, SimTime::ZERO).unwrap();
        assert_eq!(half.as_millis(), 2 * full.as_millis());
    }
}
