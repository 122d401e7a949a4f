use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Config;
use crate::error::ConfigError;
use crate::hybrid::Mode;
use crate::swarm::{classify_peer, Bandwidth, FileMap, PeerClass, PeerId};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeederRole {
    ServesAll,
    StaticOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: PeerId,
    pub class: PeerClass,
    pub bandwidth: Bandwidth,
    pub seeder: bool,
    pub role: SeederRole,
    pub join_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPlan {
    pub map: FileMap,
    pub nodes: Vec<NodeSpec>,
}

impl ScenarioPlan {
    pub fn num_mobile(&self) -> usize {
        self.nodes.iter().filter(|n| n.class.is_mobile()).count()
    }
}

/// Seeders take ids `0..num_seeders`, leechers follow. Exactly
/// `round(mobile_fraction * num_peers)` leechers draw mobile bandwidth. With
/// two or more seeders in hybrid mode, every second seeder serves static
/// peers only.
pub fn build_scenario<R: Rng + ?Sized>(cfg: &Config, mode: Mode, rng: &mut R) -> Result<ScenarioPlan, ConfigError> {
    cfg.validate()?;
    let map = cfg.file_map()?;
    let s = &cfg.scenario;
    let b = &cfg.bandwidth;
    let n_seed = s.num_seeders as usize;
    let n_peers = s.num_peers as usize;

    let n_mobile = (s.mobile_fraction * n_peers as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_peers).collect();
    order.shuffle(rng);
    let mut mobile = vec![false; n_peers];
    for &i in &order[..n_mobile] {
        mobile[i] = true;
    }

    let split_roles = mode == Mode::Hybrid && n_seed >= 2;
    let mut nodes = Vec::with_capacity(n_seed + n_peers);
    for i in 0..n_seed + n_peers {
        let seeder = i < n_seed;
        let (down, up) = if seeder {
            (b.seeder_down, b.seeder_up)
        } else if mobile[i - n_seed] {
            (b.mobile_down, b.mobile_up)
        } else {
            (b.static_down, b.static_up)
        };
        let down = down.sample_u64(rng);
        let up = up.sample_u64(rng);
        let bandwidth = Bandwidth::new(up, down)?;
        let join_at = if seeder || s.join_window_s == 0.0 {
            SimTime::ZERO
        } else {
            SimTime::from_secs_f64(rng.random_range(0.0..=s.join_window_s))
        };
        let role = if split_roles && seeder && i % 2 == 1 {
            SeederRole::StaticOnly
        } else {
            SeederRole::ServesAll
        };
        nodes.push(NodeSpec {
            id: PeerId(i as u32),
            class: classify_peer(bandwidth, b.mobile_threshold),
            bandwidth,
            seeder,
            role,
            join_at,
        });
    }
    Ok(ScenarioPlan { map, nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(peers: u32, seeders: u32, frac: f64) -> Config {
        let mut c = Config::default();
        c.scenario.num_peers = peers;
        c.scenario.num_seeders = seeders;
        c.scenario.mobile_fraction = frac;
        c
    }

    #[test]
    fn ten_to_one_swarm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = build_scenario(&cfg(10, 1, 0.5), Mode::Baseline, &mut rng).unwrap();
        assert_eq!(plan.nodes.len(), 11);
        assert_eq!(plan.nodes.iter().filter(|n| n.seeder).count(), 1);
        assert!(plan.nodes[0].seeder);
        assert_eq!(plan.num_mobile(), 5);
    }

    #[test]
    fn no_mobile_fraction_gives_static_swarm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = build_scenario(&cfg(10, 1, 0.0), Mode::Hybrid, &mut rng).unwrap();
        assert!(plan.nodes.iter().all(|n| n.class == PeerClass::Static));
    }

    #[test]
    fn hybrid_seeders_alternate_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = build_scenario(&cfg(20, 2, 0.5), Mode::Hybrid, &mut rng).unwrap();
        assert_eq!(plan.nodes[0].role, SeederRole::ServesAll);
        assert_eq!(plan.nodes[1].role, SeederRole::StaticOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = build_scenario(&cfg(20, 2, 0.5), Mode::Baseline, &mut rng).unwrap();
        assert!(base.nodes.iter().all(|n| n.role == SeederRole::ServesAll));
    }

    #[test]
    fn draws_do_not_depend_on_mode() {
        let c = cfg(30, 3, 0.4);
        let a = build_scenario(&c, Mode::Baseline, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_scenario(&c, Mode::Hybrid, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!((x.class, x.bandwidth, x.join_at), (y.class, y.bandwidth, y.join_at));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = cfg(10, 0, 2.0);
        c.file.block_size = 0;
        let err = build_scenario(&c, Mode::Baseline, &mut rng).unwrap_err();
        assert!(err.violations.len() >= 3, "{err}");
    }
}
