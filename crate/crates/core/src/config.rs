//! Scenario configuration loaded from TOML.
//!
//! Every tunable has a default, so an empty file describes the reference
//! scenario: 100 peers, 10 seeders, half of the peers mobile.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error};
use crate::hybrid::Mode;
use crate::swarm::{partition_file, FileMap, DEFAULT_BLOCK_SIZE, DEFAULT_PIECE_SIZE};
use crate::time::SimTime;

const KB: u64 = 1024;

/// A fixed value or a uniform range `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dist {
    Point(f64),
    Range([f64; 2]),
}

impl Dist {
    fn bounds(self) -> (f64, f64) {
        match self {
            Dist::Point(v) => (v, v),
            Dist::Range([lo, hi]) => (lo, hi),
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Dist::Point(v) => v,
            Dist::Range([lo, hi]) => rng.random_range(lo..=hi),
        }
    }

    /// Integer draw, used for rates in bytes per second.
    pub fn sample_u64<R: Rng + ?Sized>(self, rng: &mut R) -> u64 {
        match self {
            Dist::Point(v) => v.round() as u64,
            Dist::Range([lo, hi]) => rng.random_range(lo.round() as u64..=hi.round() as u64),
        }
    }

    fn check_positive(self, name: &str, out: &mut Vec<String>) {
        let (lo, hi) = self.bounds();
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 {
            out.push(format!("{name} must be finite and > 0"));
        } else if lo > hi {
            out.push(format!("{name} range is empty ({lo} > {hi})"));
        }
    }

    fn check_non_negative(self, name: &str, out: &mut Vec<String>) {
        let (lo, hi) = self.bounds();
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 {
            out.push(format!("{name} must be finite and >= 0"));
        } else if lo > hi {
            out.push(format!("{name} range is empty ({lo} > {hi})"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub num_peers: u32,
    pub num_seeders: u32,
    pub mobile_fraction: f64,
    pub sim_duration_s: f64,
    pub rng_seed: u64,
    /// Peers join uniformly over `[0, join_window_s]`.
    pub join_window_s: f64,
    pub mode: Option<Mode>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            num_peers: 100,
            num_seeders: 10,
            mobile_fraction: 0.5,
            sim_duration_s: 1800.0,
            rng_seed: 1,
            join_window_s: 0.0,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileSection {
    pub file_size: u64,
    pub piece_size: u64,
    pub block_size: u64,
}

impl Default for FileSection {
    fn default() -> Self {
        Self {
            file_size: 4 * 1024 * KB,
            piece_size: DEFAULT_PIECE_SIZE,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthSection {
    pub mobile_down: Dist,
    pub mobile_up: Dist,
    pub static_down: Dist,
    pub static_up: Dist,
    pub seeder_down: Dist,
    pub seeder_up: Dist,
    /// Peers whose downlink is at or below this are mobile.
    pub mobile_threshold: u64,
}

impl Default for BandwidthSection {
    fn default() -> Self {
        Self {
            mobile_down: Dist::Point((40 * KB) as f64),
            mobile_up: Dist::Point((10 * KB) as f64),
            static_down: Dist::Point((500 * KB) as f64),
            static_up: Dist::Point((100 * KB) as f64),
            seeder_down: Dist::Point((500 * KB) as f64),
            seeder_up: Dist::Point((100 * KB) as f64),
            mobile_threshold: 64 * KB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    /// Any link with a mobile end.
    pub mobile_s: Dist,
    pub static_s: Dist,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            mobile_s: Dist::Point(0.150),
            static_s: Dist::Point(0.020),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnSection {
    pub enabled: bool,
    /// `inf` disables departures.
    pub mean_online_s: f64,
    pub mean_offline_s: f64,
}

impl Default for ChurnSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mean_online_s: 300.0,
            mean_offline_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub u_default: u32,
    pub budget_cap: u32,
    pub max_neighbors: usize,
    pub announce_interval_s: f64,
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self {
            u_default: crate::tracker::DEFAULT_U,
            budget_cap: crate::tracker::DEFAULT_BUDGET_CAP,
            max_neighbors: crate::tracker::DEFAULT_MAX_NEIGHBORS,
            announce_interval_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub choke_interval_s: f64,
    pub optimistic_interval_s: f64,
    pub rate_window_s: f64,
    pub regular_slots: usize,
    pub trial_len_s: f64,
    pub warmup_min: f64,
    /// Rank unchoke candidates by the rate they currently allocate to us
    /// instead of bytes received.
    pub rank_by_our: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            choke_interval_s: 10.0,
            optimistic_interval_s: 30.0,
            rate_window_s: 20.0,
            regular_slots: 4,
            trial_len_s: 120.0,
            warmup_min: 0.25,
            rank_by_our: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridSection {
    pub min_seed_rate: u64,
    pub r_min_mobile: u64,
    pub latency_threshold_s: f64,
    /// Rotate extra mobile destinations round-robin instead of sampling them.
    pub rotate_mobile: bool,
}

impl Default for HybridSection {
    fn default() -> Self {
        Self {
            min_seed_rate: 50 * KB,
            r_min_mobile: 10 * KB,
            latency_threshold_s: 2.0,
            rotate_mobile: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub sample_interval_s: f64,
    pub checkpoint_frac: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            sample_interval_s: 1.0,
            checkpoint_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scenario: Scenario,
    pub file: FileSection,
    pub bandwidth: BandwidthSection,
    pub latency: LatencySection,
    pub churn: ChurnSection,
    pub tracker: TrackerSection,
    pub protocol: ProtocolSection,
    pub hybrid: HybridSection,
    pub metrics: MetricsSection,
}

fn positive_secs(v: f64, name: &str, out: &mut Vec<String>) {
    if !(v.is_finite() && v > 0.0) {
        out.push(format!("{name} must be finite and > 0"));
    } else if SimTime::from_secs_f64(v) == SimTime::ZERO {
        out.push(format!("{name} must be at least 1 ms"));
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::single(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let s = &self.scenario;
        if s.num_seeders < 1 {
            v.push("scenario.num_seeders must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&s.mobile_fraction) {
            v.push("scenario.mobile_fraction must lie in [0, 1]".to_string());
        }
        positive_secs(s.sim_duration_s, "scenario.sim_duration_s", &mut v);
        if !(s.join_window_s.is_finite() && s.join_window_s >= 0.0) {
            v.push("scenario.join_window_s must be finite and >= 0".to_string());
        }

        if let Err(e) = self.file_map() {
            v.extend(e.violations.into_iter().map(|m| format!("file: {m}")));
        }

        let b = &self.bandwidth;
        b.mobile_down.check_positive("bandwidth.mobile_down", &mut v);
        b.mobile_up.check_positive("bandwidth.mobile_up", &mut v);
        b.static_down.check_positive("bandwidth.static_down", &mut v);
        b.static_up.check_positive("bandwidth.static_up", &mut v);
        b.seeder_down.check_positive("bandwidth.seeder_down", &mut v);
        b.seeder_up.check_positive("bandwidth.seeder_up", &mut v);
        if b.mobile_threshold == 0 {
            v.push("bandwidth.mobile_threshold must be > 0".to_string());
        }

        self.latency.mobile_s.check_non_negative("latency.mobile_s", &mut v);
        self.latency.static_s.check_non_negative("latency.static_s", &mut v);

        let c = &self.churn;
        if !(c.mean_online_s > 0.0) {
            v.push("churn.mean_online_s must be > 0".to_string());
        }
        if !(c.mean_offline_s > 0.0 && c.mean_offline_s.is_finite()) {
            v.push("churn.mean_offline_s must be finite and > 0".to_string());
        }

        let t = &self.tracker;
        if t.u_default < 1 {
            v.push("tracker.u_default must be >= 1".to_string());
        }
        if t.budget_cap < 1 {
            v.push("tracker.budget_cap must be >= 1".to_string());
        }
        if t.max_neighbors < 1 {
            v.push("tracker.max_neighbors must be >= 1".to_string());
        }
        positive_secs(t.announce_interval_s, "tracker.announce_interval_s", &mut v);

        let p = &self.protocol;
        positive_secs(p.choke_interval_s, "protocol.choke_interval_s", &mut v);
        positive_secs(p.optimistic_interval_s, "protocol.optimistic_interval_s", &mut v);
        positive_secs(p.rate_window_s, "protocol.rate_window_s", &mut v);
        if p.regular_slots < 1 {
            v.push("protocol.regular_slots must be >= 1".to_string());
        }
        if !(p.trial_len_s.is_finite() && p.trial_len_s >= 0.0) {
            v.push("protocol.trial_len_s must be finite and >= 0".to_string());
        }
        if !(p.warmup_min > 0.0 && p.warmup_min <= 1.0) {
            v.push("protocol.warmup_min must lie in (0, 1]".to_string());
        }

        let h = &self.hybrid;
        if h.r_min_mobile == 0 {
            v.push("hybrid.r_min_mobile must be > 0".to_string());
        }
        if !(h.latency_threshold_s.is_finite() && h.latency_threshold_s > 0.0) {
            v.push("hybrid.latency_threshold_s must be finite and > 0".to_string());
        }

        positive_secs(self.metrics.sample_interval_s, "metrics.sample_interval_s", &mut v);
        if !(self.metrics.checkpoint_frac > 0.0 && self.metrics.checkpoint_frac <= 1.0) {
            v.push("metrics.checkpoint_frac must lie in (0, 1]".to_string());
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    pub fn file_map(&self) -> Result<FileMap, ConfigError> {
        partition_file(self.file.file_size, self.file.piece_size, self.file.block_size)
    }

    pub fn churn_active(&self) -> bool {
        self.churn.enabled && self.churn.mean_online_s.is_finite()
    }
}
