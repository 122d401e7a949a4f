use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::swarm::PeerClass;
use crate::time::SimTime;

/// Exponential on/off sessions for mobile peers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChurnModel {
    pub mean_online_s: f64,
    pub mean_offline_s: f64,
}

impl ChurnModel {
    pub fn new(mean_online_s: f64, mean_offline_s: f64) -> Self {
        Self {
            mean_online_s,
            mean_offline_s,
        }
    }

    pub fn disabled() -> Self {
        Self::new(f64::INFINITY, 60.0)
    }

    fn draw<R: Rng + ?Sized>(mean_s: f64, rng: &mut R) -> Option<SimTime> {
        if !mean_s.is_finite() {
            return None;
        }
        let exp = Exp::new(1.0 / mean_s).expect("positive mean");
        // at least one tick so a session never has zero length
        Some(SimTime::from_secs_f64(exp.sample(rng)).max(SimTime::from_millis(1)))
    }
}

/// Time of the peer's next leave (if online) or return (if offline). Static
/// peers never churn.
pub fn churn_step<R: Rng + ?Sized>(
    model: &ChurnModel,
    class: PeerClass,
    online: bool,
    now: SimTime,
    rng: &mut R,
) -> Option<SimTime> {
    if class != PeerClass::Mobile {
        return None;
    }
    let mean = if online {
        model.mean_online_s
    } else {
        model.mean_offline_s
    };
    ChurnModel::draw(mean, rng).map(|d| now.saturating_add(d))
}
