//! Fixtures shared by the criterion benchmarks in `benches/`.

use bcounter::sim::{SimConfig, Strategy};
use bcounter::{BoundedCounter, Polarity, ReplicaId};

/// A lower-bound counter over `replicas` replicas, created at r0 with
/// `slack` rights above bound 0, which r0 then spreads evenly.
pub fn spread(replicas: usize, slack: i64) -> BoundedCounter {
    let mut c = BoundedCounter::new(Polarity::Lower, 0, replicas, ReplicaId(0), slack).unwrap();
    let share = slack / replicas as i64;
    for to in 1..replicas as u32 {
        c.transfer(ReplicaId(0), ReplicaId(to), share).unwrap();
    }
    c
}

/// Two states that diverged from `spread(replicas, slack)`: each replica
/// consumed some of its own rights on one side or the other.
pub fn diverged(replicas: usize, slack: i64) -> (BoundedCounter, BoundedCounter) {
    let base = spread(replicas, slack);
    let (mut a, mut b) = (base.clone(), base);
    for i in 0..replicas as u32 {
        let side = if i % 2 == 0 { &mut a } else { &mut b };
        side.decrement(ReplicaId(i), 1).unwrap();
        side.increment(ReplicaId(i), 2).unwrap();
    }
    (a, b)
}

/// A short single-counter simulation.
pub fn short_run(strategy: Strategy, clients: u32) -> SimConfig {
    SimConfig {
        strategy,
        clients,
        duration_ms: 2_000.0,
        drain_ms: 500.0,
        ..SimConfig::default()
    }
}
