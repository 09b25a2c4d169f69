//! Cycle-level simulator of a tiled NeuraChip.
//!
//! [`engine::run`] drives NeuraCores ([`neuracore`]), NeuraMems
//! ([`neuramem`]), per-tile memory controllers ([`memsys`]) and the torus
//! interconnect ([`noc`]) over a compiled workload until every output has
//! been written back, and returns the output matrix with a
//! [`MetricsReport`].

pub mod config;
pub mod dispatch;
pub mod engine;
pub mod memsys;
pub mod metrics;
pub mod neuracore;
pub mod neuramem;
pub mod noc;
pub mod packet;

pub use config::{ConfigError, EvictionMode, TileConfig};
pub use engine::{run, RunOptions, RunResult, SimError};
pub use metrics::MetricsReport;
