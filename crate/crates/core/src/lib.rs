//! Deterministic discrete-event simulator for BitTorrent swarms where some
//! peers sit behind slow, high-latency mobile links.
//!
//! The [`engine`] drives a swarm built from a [`config::Config`] in either
//! [`hybrid::Mode::Baseline`] or [`hybrid::Mode::Hybrid`], recording every
//! block transfer into a [`metrics::MetricsLog`].

pub mod audit;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod hybrid;
pub mod metrics;
pub mod protocol;
pub mod swarm;
pub mod time;
pub mod tracker;

pub use error::{Error, Result};
