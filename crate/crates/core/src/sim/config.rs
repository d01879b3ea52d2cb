//! Simulation parameters, read from TOML.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::api::OpFlag;
use crate::crdt::Polarity;
use crate::store::StoreTiming;

use super::SimError;

/// Which system runs on top of the stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Replicated PN counter; clients check the bound on a local read.
    Weak,
    /// Bounded counter through the client-side middleware.
    Bcclt,
    /// Bounded counter through owner nodes with batching.
    Bcsrv,
    /// Owner nodes writing every operation on its own.
    #[serde(alias = "bcsrv_nobatch")]
    BcsrvNobatch,
    /// A single copy in one data center, updated with conditional writes.
    Strong,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Weak,
        Strategy::Bcclt,
        Strategy::Bcsrv,
        Strategy::BcsrvNobatch,
        Strategy::Strong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Weak => "weak",
            Strategy::Bcclt => "bcclt",
            Strategy::Bcsrv => "bcsrv",
            Strategy::BcsrvNobatch => "bcsrv-nobatch",
            Strategy::Strong => "strong",
        }
    }

    /// Strategies that keep the bound.
    pub fn is_bounded(self) -> bool {
        self != Strategy::Weak
    }

    pub fn uses_owner_nodes(self) -> bool {
        matches!(self, Strategy::Bcsrv | Strategy::BcsrvNobatch)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('-', "_") == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                format!("unknown strategy {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Fault {
    /// Messages between `side` and the other data centers are dropped.
    Partition {
        side: Vec<u32>,
        start_ms: f64,
        end_ms: f64,
    },
    /// An owner node stops; its cache is lost.
    Crash {
        dc: u32,
        node: u32,
        start_ms: f64,
        end_ms: f64,
    },
}

/// Default round-trip times between three data centers (US-East, US-West,
/// EU), in milliseconds: the larger direction of each measured pair.
pub fn default_rtt() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 83.0, 96.0],
        vec![83.0, 0.0, 163.0],
        vec![96.0, 163.0, 0.0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub seed: u64,
    /// Clients issue operations during this period.
    pub duration_ms: f64,
    /// Simulated time after the load stops, for synchronization to settle.
    pub drain_ms: f64,
    pub bucket_ms: f64,
    /// `rtt_ms[a][b]`: round trip from `a` to `b`. Its size sets the number
    /// of data centers.
    pub rtt_ms: Vec<Vec<f64>>,
    /// Uniform extra one-way delay in `[0, net_jitter_ms]`.
    pub net_jitter_ms: f64,
    /// One-way delay between a client and a node of its own data center.
    pub hop_ms: f64,
    /// Total clients, assigned to data centers round-robin.
    pub clients: u32,
    pub think_ms: f64,
    pub inc_fraction: f64,
    pub dec_fraction: f64,
    pub delta: i64,
    pub flag: OpFlag,
    pub counters: u32,
    pub initial: i64,
    pub bound: i64,
    pub polarity: Polarity,
    pub nodes_per_dc: u32,
    /// Operations per write for owner nodes; 0 for no limit.
    pub max_batch: usize,
    pub sync_period_ms: f64,
    pub rebalance_period_ms: f64,
    /// Defaults to a tenth of an even share of the initial slack.
    pub rebalance_threshold: Option<i64>,
    pub retry_limit: u32,
    pub client_timeout_ms: f64,
    pub strong_home_dc: u32,
    /// Delay before a crashed node's keys move to other nodes.
    pub crash_detect_ms: f64,
    /// Record every operation in the report.
    pub op_log: bool,
    pub store: StoreTiming,
    pub faults: Vec<Fault>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            strategy: Strategy::Bcsrv,
            seed: 1,
            duration_ms: 10_000.0,
            drain_ms: 2_000.0,
            bucket_ms: 1_000.0,
            rtt_ms: default_rtt(),
            net_jitter_ms: 0.5,
            hop_ms: 1.0,
            clients: 30,
            think_ms: 100.0,
            inc_fraction: 0.2,
            dec_fraction: 0.8,
            delta: 1,
            flag: OpFlag::Global,
            counters: 1,
            initial: 1_000_000_000,
            bound: 0,
            polarity: Polarity::Lower,
            nodes_per_dc: 3,
            max_batch: 0,
            sync_period_ms: 50.0,
            rebalance_period_ms: 100.0,
            rebalance_threshold: None,
            retry_limit: 16,
            client_timeout_ms: 2_000.0,
            strong_home_dc: 0,
            crash_detect_ms: 500.0,
            op_log: false,
            store: StoreTiming::default(),
            faults: Vec::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ConfigInvalid(msg.into())
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let config: SimConfig = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn dcs(&self) -> usize {
        self.rtt_ms.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.dcs();
        if n == 0 {
            return Err(invalid("rtt_ms must describe at least one data center"));
        }
        for (a, row) in self.rtt_ms.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!("rtt_ms row {a} has {} entries, expected {n}", row.len())));
            }
            for (b, &rtt) in row.iter().enumerate() {
                if a != b && !(rtt > 0.0 && rtt.is_finite()) {
                    return Err(invalid(format!("rtt_ms[{a}][{b}] must be positive")));
                }
            }
        }
        for (name, v) in [("inc_fraction", self.inc_fraction), ("dec_fraction", self.dec_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if (self.inc_fraction + self.dec_fraction - 1.0).abs() > 1e-9 {
            return Err(invalid("inc_fraction and dec_fraction must sum to 1"));
        }
        if self.delta <= 0 {
            return Err(invalid("delta must be positive"));
        }
        if self.counters == 0 {
            return Err(invalid("counters must be at least 1"));
        }
        let ok_initial = match self.polarity {
            Polarity::Lower => self.initial >= self.bound,
            Polarity::Upper => self.initial <= self.bound,
        };
        if !ok_initial {
            return Err(invalid("initial value violates the bound"));
        }
        if self.strategy.uses_owner_nodes() && self.nodes_per_dc == 0 {
            return Err(invalid("nodes_per_dc must be at least 1"));
        }
        if self.strong_home_dc as usize >= n {
            return Err(invalid("strong_home_dc is not a data center"));
        }
        if self.retry_limit == 0 {
            return Err(invalid("retry_limit must be at least 1"));
        }
        let positive = [
            ("duration_ms", self.duration_ms),
            ("bucket_ms", self.bucket_ms),
            ("sync_period_ms", self.sync_period_ms),
            ("rebalance_period_ms", self.rebalance_period_ms),
            ("client_timeout_ms", self.client_timeout_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("drain_ms", self.drain_ms),
            ("think_ms", self.think_ms),
            ("net_jitter_ms", self.net_jitter_ms),
            ("hop_ms", self.hop_ms),
            ("crash_detect_ms", self.crash_detect_ms),
            ("store.read_ms", self.store.read_ms),
            ("store.write_ms", self.store.write_ms),
            ("store.write_service_ms", self.store.write_service_ms),
            ("store.jitter_ms", self.store.jitter_ms),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        for (i, fault) in self.faults.iter().enumerate() {
            let (start, end) = match fault {
                Fault::Partition { side, start_ms, end_ms } => {
                    if side.is_empty() || side.iter().any(|&d| d as usize >= n) {
                        return Err(invalid(format!("fault {i}: partition side must list data centers")));
                    }
                    (*start_ms, *end_ms)
                }
                Fault::Crash { dc, node, start_ms, end_ms } => {
                    if *dc as usize >= n || *node >= self.nodes_per_dc {
                        return Err(invalid(format!("fault {i}: no such node")));
                    }
                    (*start_ms, *end_ms)
                }
            };
            if !(start >= 0.0 && end > start) {
                return Err(invalid(format!("fault {i}: need 0 <= start_ms < end_ms")));
            }
        }
        Ok(())
    }
}
