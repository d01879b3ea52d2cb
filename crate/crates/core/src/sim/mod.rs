//! Deterministic discrete-event simulation of several data centers.
//!
//! A run is fully described by a [`SimConfig`]: topology, store timing,
//! closed-loop clients, the strategy under test, and a fault schedule. It
//! produces per-bucket [`MetricsRow`]s (CSV via [`SimOutput::csv`]) and a
//! [`Report`]. Equal configs, seed included, give byte-identical output.
//!
//! Time is kept in integer microseconds and all randomness comes from one
//! seeded ChaCha stream consumed in event order.

mod config;
mod engine;
mod metrics;
pub mod scenarios;
mod weak;

use thiserror::Error;

pub use config::{default_rtt, Fault, SimConfig, Strategy};
pub use engine::{run, SimOutput};
pub use metrics::{from_csv, percentile, to_csv, MetricsRow, OpRecord, Report, CSV_COLUMNS, CSV_VERSION_LINE};
pub use weak::PnCounter;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    /// The config text is not valid TOML for [`SimConfig`].
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}
