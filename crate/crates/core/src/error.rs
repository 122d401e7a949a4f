use std::path::PathBuf;

use thiserror::Error;

use crate::swarm::PeerId;
use crate::time::SimTime;

/// Rejected scenario or file-layout parameters. Every violated field is listed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {}", .violations.join("; "))]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl ConfigError {
    pub fn single(msg: impl Into<String>) -> Self {
        Self {
            violations: vec![msg.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrackerError {
    #[error("peer {peer} announced as {announced:?} but is registered as {registered:?}")]
    ClassChanged {
        peer: PeerId,
        registered: crate::swarm::PeerClass,
        announced: crate::swarm::PeerClass,
    },
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
}

/// Internal invariant violations that abort a run.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    Causality { now: SimTime, at: SimTime },
    #[error("transfer requested at zero rate from {src} to {dst}")]
    ZeroRate { src: PeerId, dst: PeerId },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation aborted: {0}")]
    Sim(#[from] SimError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
    #[error("seed sets differ: baseline {baseline:?}, hybrid {hybrid:?}")]
    SeedMismatch { baseline: Vec<u64>, hybrid: Vec<u64> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
