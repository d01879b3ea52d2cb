//! Bundled experiment sweeps.

use super::config::{SimConfig, Strategy};
use super::SimError;

pub const NAMES: [&str; 4] = ["single-counter", "multi-counter-100", "exhaustion-6000", "violation-count"];

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// File-name friendly label, e.g. `violation-count-weak-50`.
    pub name: String,
    pub config: SimConfig,
}

/// Base configuration of a scenario, before sweeping.
pub fn base(name: &str) -> Result<SimConfig, SimError> {
    let c = SimConfig::default();
    let config = match name {
        "single-counter" => SimConfig {
            duration_ms: 10_000.0,
            ..c
        },
        "multi-counter-100" => SimConfig {
            counters: 100,
            duration_ms: 10_000.0,
            ..c
        },
        "exhaustion-6000" => SimConfig {
            strategy: Strategy::Bcsrv,
            clients: 15,
            initial: 6000,
            inc_fraction: 0.0,
            dec_fraction: 1.0,
            duration_ms: 60_000.0,
            op_log: true,
            ..c
        },
        "violation-count" => SimConfig {
            initial: 6000,
            inc_fraction: 0.0,
            dec_fraction: 1.0,
            duration_ms: 80_000.0,
            ..c
        },
        other => return Err(SimError::UnknownScenario(other.to_owned())),
    };
    Ok(config)
}

/// Default sweep axes of a scenario: (strategies, client counts).
pub fn axes(name: &str) -> Result<(Vec<Strategy>, Vec<u32>), SimError> {
    let all = Strategy::ALL.to_vec();
    Ok(match name {
        "single-counter" | "multi-counter-100" => (all, vec![15, 60, 240]),
        "exhaustion-6000" => (vec![Strategy::Bcsrv], vec![15]),
        "violation-count" => (all, vec![10, 50, 100, 200]),
        other => return Err(SimError::UnknownScenario(other.to_owned())),
    })
}

/// Expands a scenario over strategies and client counts; `None` keeps the
/// scenario's default axis.
pub fn sweep(
    name: &str,
    strategies: Option<&[Strategy]>,
    clients: Option<&[u32]>,
) -> Result<Vec<SweepPoint>, SimError> {
    let template = base(name)?;
    let (default_strategies, default_clients) = axes(name)?;
    let strategies = strategies.map(<[_]>::to_vec).unwrap_or(default_strategies);
    let clients = clients.map(<[_]>::to_vec).unwrap_or(default_clients);
    let mut points = Vec::new();
    for &strategy in &strategies {
        for &n in &clients {
            points.push(SweepPoint {
                name: format!("{name}-{strategy}-{n}"),
                config: SimConfig {
                    strategy,
                    clients: n,
                    ..template.clone()
                },
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_expands_to_valid_configs() {
        for name in NAMES {
            let points = sweep(name, None, None).unwrap();
            assert!(!points.is_empty());
            for p in points {
                p.config.validate().unwrap();
                assert!(p.name.starts_with(name));
            }
        }
    }

    #[test]
    fn overrides_replace_axes() {
        let points = sweep("violation-count", Some(&[Strategy::Weak]), Some(&[3])).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].name, "violation-count-weak-3");
        assert_eq!(points[0].config.clients, 3);
    }

    #[test]
    fn unknown_scenario() {
        assert_eq!(base("nope"), Err(SimError::UnknownScenario("nope".into())));
    }
}
