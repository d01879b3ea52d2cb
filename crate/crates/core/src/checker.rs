//! Exhaustive exploration of small counter executions.
//!
//! The explorer runs a breadth-first search over the joint state of all
//! replicas. A step is either an update authored at one replica (increment,
//! decrement, or a unit transfer to another replica) or a full-state merge of
//! one replica into another. Every reachable state is checked for:
//!
//! * each replica's value respecting the bound,
//! * the join of all replicas respecting the bound,
//! * non-negative local rights at every replica,
//! * order-insensitive convergence of the join,
//! * each replica's local rights not exceeding its rights on the join.
//!
//! The visited set is keyed by the concatenated canonical encodings of the
//! replica states plus the number of merges spent. Update budgets need no
//! extra bookkeeping: every replica's own row of its own state records
//! exactly what it authored.

use std::collections::VecDeque;

use fnv::FnvHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crdt::{BoundedCounter, CounterError, Polarity, ReplicaId};

/// Hard limits on the static parameters.
pub const MAX_REPLICAS: usize = 4;
pub const MAX_UPDATES: u32 = 16;
pub const MAX_MERGES: u32 = 12;
pub const DEFAULT_MAX_STATES: usize = 20_000_000;

/// Deliberate faults for testing the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// The rights-consuming update ignores the rights precondition.
    SkipDecCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreSpec {
    pub replicas: usize,
    pub polarity: Polarity,
    pub bound: i64,
    pub initial: i64,
    /// Per-replica budgets.
    pub incs: u32,
    pub decs: u32,
    pub transfers: u32,
    /// Total updates over all replicas.
    pub max_updates: u32,
    pub max_merges: u32,
    pub max_states: usize,
    #[serde(default)]
    pub mutation: Mutation,
}

impl ExploreSpec {
    /// Lower-bound spec with default budgets: at most 8 updates and 6 merges.
    pub fn new(replicas: usize, bound: i64, initial: i64) -> Self {
        ExploreSpec {
            replicas,
            polarity: Polarity::Lower,
            bound,
            initial,
            incs: 0,
            decs: 3,
            transfers: 2,
            max_updates: 8,
            max_merges: 6,
            max_states: DEFAULT_MAX_STATES,
            mutation: Mutation::None,
        }
    }

    fn initial_states(&self) -> Result<Vec<BoundedCounter>, CheckError> {
        let first = BoundedCounter::new(
            self.polarity,
            self.bound,
            self.replicas,
            ReplicaId(0),
            self.initial,
        )?;
        let mut states = vec![first];
        for _ in 1..self.replicas {
            states.push(BoundedCounter::empty(self.polarity, self.bound, self.replicas)?);
        }
        Ok(states)
    }

    fn check_limits(&self) -> Result<(), CheckError> {
        if self.replicas > MAX_REPLICAS || self.max_updates > MAX_UPDATES || self.max_merges > MAX_MERGES {
            return Err(CheckError::BudgetTooLarge(format!(
                "replicas {} (max {MAX_REPLICAS}), updates {} (max {MAX_UPDATES}), merges {} (max {MAX_MERGES})",
                self.replicas, self.max_updates, self.max_merges
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOp {
    Inc,
    Dec,
    Transfer { to: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Update { replica: u32, op: UpdateOp },
    Merge { into: u32, from: u32 },
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Step::Update { replica, op: UpdateOp::Inc } => write!(f, "r{replica}: inc(1)"),
            Step::Update { replica, op: UpdateOp::Dec } => write!(f, "r{replica}: dec(1)"),
            Step::Update { replica, op: UpdateOp::Transfer { to } } => {
                write!(f, "r{replica}: transfer(1) to r{to}")
            }
            Step::Merge { into, from } => write!(f, "r{into}: merge state of r{from}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Violation {
    LocalBound { replica: u32, value: i64 },
    GlobalBound { value: i64 },
    NegativeRights { replica: u32, rights: i64 },
    Divergence,
    NotConservative { replica: u32, local: i64, joined: i64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::LocalBound { replica, value } => {
                write!(f, "r{replica} observes value {value} beyond the bound")
            }
            Violation::GlobalBound { value } => write!(f, "joined value {value} is beyond the bound"),
            Violation::NegativeRights { replica, rights } => {
                write!(f, "r{replica} holds {rights} rights")
            }
            Violation::Divergence => f.write_str("merge order changes the joined state"),
            Violation::NotConservative { replica, local, joined } => write!(
                f,
                "r{replica} sees {local} rights locally but {joined} on the join"
            ),
        }
    }
}

/// A replayable execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub spec: ExploreSpec,
    pub steps: Vec<Step>,
    pub violation: Option<Violation>,
    /// Hex SHA-256 of the final joint state.
    pub fingerprint: String,
}

impl Trace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("traces serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckError> {
        serde_json::from_str(text).map_err(|e| CheckError::MalformedTrace(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub states: u64,
    pub transitions: u64,
    pub max_depth: usize,
    /// Path to the last state discovered, for replay checks.
    pub witness: Trace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Verified(Report),
    Counterexample(Trace),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("exploration budget too large: {0}")]
    BudgetTooLarge(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(#[from] CounterError),
    #[error("step {index} ({step}) cannot be applied: {reason}")]
    InvalidStep {
        index: usize,
        step: Step,
        reason: String,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Joint state of all replicas, canonical key and merges spent.
#[derive(Clone)]
struct Joint {
    replicas: Vec<BoundedCounter>,
    merges: u32,
}

impl Joint {
    fn key(&self) -> Vec<u8> {
        let mut key = Vec::with_capacity(64 * self.replicas.len());
        key.extend_from_slice(&self.merges.to_le_bytes());
        for r in &self.replicas {
            key.extend_from_slice(&r.encode());
        }
        key
    }
}

/// Hex SHA-256 over the concatenated encodings of `replicas`.
pub fn fingerprint(replicas: &[BoundedCounter]) -> String {
    let mut hasher = Sha256::new();
    for r in replicas {
        hasher.update(r.encode());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Budget usage of replica `i`, read off its own state: (increments,
/// decrements, transfers).
fn usage(spec: &ExploreSpec, state: &BoundedCounter, i: u32) -> (u32, u32, u32) {
    let me = ReplicaId(i);
    let mut created = state.rights_entry(me, me);
    if i == 0 {
        created -= (spec.initial - spec.bound).abs();
    }
    let consumed = state.consumed_entry(me);
    let sent: i64 = state
        .replica_ids()
        .filter(|&j| j != me)
        .map(|j| state.rights_entry(me, j))
        .sum();
    let (incs, decs) = match spec.polarity {
        Polarity::Lower => (created, consumed),
        Polarity::Upper => (consumed, created),
    };
    (incs as u32, decs as u32, sent as u32)
}

fn respects(polarity: Polarity, bound: i64, value: i64) -> bool {
    match polarity {
        Polarity::Lower => value >= bound,
        Polarity::Upper => value <= bound,
    }
}

/// Applies `op` at `replica`. `Ok(false)` when a precondition fails.
fn apply_update(
    spec: &ExploreSpec,
    state: &mut BoundedCounter,
    replica: u32,
    op: UpdateOp,
) -> Result<bool, CounterError> {
    let at = ReplicaId(replica);
    let consumes = matches!(
        (spec.polarity, op),
        (Polarity::Lower, UpdateOp::Dec) | (Polarity::Upper, UpdateOp::Inc)
    );
    let result = match op {
        _ if consumes && spec.mutation == Mutation::SkipDecCheck => state.consume_unchecked(at, 1),
        UpdateOp::Inc => state.increment(at, 1),
        UpdateOp::Dec => state.decrement(at, 1),
        UpdateOp::Transfer { to } => state.transfer(at, ReplicaId(to), 1),
    };
    match result {
        Ok(()) => Ok(true),
        Err(CounterError::NotEnoughRights { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

fn join_in_order(replicas: &[BoundedCounter], order: &[usize]) -> BoundedCounter {
    let mut joined = replicas[order[0]].clone();
    for &i in &order[1..] {
        joined.merge(&replicas[i]).expect("replicas share identity");
    }
    joined
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..left.len() {
            let x = left.remove(k);
            prefix.push(x);
            go(prefix, left, out);
            prefix.pop();
            left.insert(k, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

fn check_state(spec: &ExploreSpec, replicas: &[BoundedCounter], orders: &[Vec<usize>]) -> Option<Violation> {
    for (i, r) in replicas.iter().enumerate() {
        let value = r.value();
        if !respects(spec.polarity, spec.bound, value) {
            return Some(Violation::LocalBound { replica: i as u32, value });
        }
        let rights = r.local_rights(ReplicaId(i as u32)).expect("replica in range");
        if rights < 0 {
            return Some(Violation::NegativeRights { replica: i as u32, rights });
        }
    }
    let joined = join_in_order(replicas, &orders[0]);
    if orders[1..].iter().any(|o| join_in_order(replicas, o) != joined) {
        return Some(Violation::Divergence);
    }
    let value = joined.value();
    if !respects(spec.polarity, spec.bound, value) {
        return Some(Violation::GlobalBound { value });
    }
    for (i, r) in replicas.iter().enumerate() {
        let id = ReplicaId(i as u32);
        let local = r.local_rights(id).expect("replica in range");
        let on_join = joined.local_rights(id).expect("replica in range");
        if local > on_join {
            return Some(Violation::NotConservative {
                replica: i as u32,
                local,
                joined: on_join,
            });
        }
    }
    None
}

/// Successors of `joint` with the step that produces each.
fn successors(spec: &ExploreSpec, joint: &Joint) -> Result<Vec<(Step, Joint)>, CheckError> {
    let n = spec.replicas as u32;
    let mut out = Vec::new();
    let total: u32 = (0..n)
        .map(|i| {
            let (a, b, c) = usage(spec, &joint.replicas[i as usize], i);
            a + b + c
        })
        .sum();
    for i in 0..n {
        if total >= spec.max_updates {
            break;
        }
        let (incs, decs, sent) = usage(spec, &joint.replicas[i as usize], i);
        let mut ops = Vec::new();
        if incs < spec.incs {
            ops.push(UpdateOp::Inc);
        }
        if decs < spec.decs {
            ops.push(UpdateOp::Dec);
        }
        if sent < spec.transfers {
            ops.extend((0..n).filter(|&j| j != i).map(|to| UpdateOp::Transfer { to }));
        }
        for op in ops {
            let mut next = joint.clone();
            if apply_update(spec, &mut next.replicas[i as usize], i, op)? {
                out.push((Step::Update { replica: i, op }, next));
            }
        }
    }
    if joint.merges < spec.max_merges {
        for into in 0..n {
            for from in 0..n {
                if into == from {
                    continue;
                }
                let (a, b) = (&joint.replicas[into as usize], &joint.replicas[from as usize]);
                // Merging a state that is already included changes nothing.
                if b.leq(a)? {
                    continue;
                }
                let mut next = joint.clone();
                next.replicas[into as usize].merge(b)?;
                next.merges += 1;
                out.push((Step::Merge { into, from }, next));
            }
        }
    }
    Ok(out)
}

struct Node {
    parent: u32,
    step: Option<Step>,
}

fn trace_to(nodes: &[Node], mut idx: u32) -> Vec<Step> {
    let mut steps = Vec::new();
    while let Some(step) = nodes[idx as usize].step {
        steps.push(step);
        idx = nodes[idx as usize].parent;
    }
    steps.reverse();
    steps
}

/// Explores every execution allowed by `spec`.
pub fn explore(spec: &ExploreSpec) -> Result<Verdict, CheckError> {
    spec.check_limits()?;
    let orders = permutations(spec.replicas);
    let start = Joint {
        replicas: spec.initial_states()?,
        merges: 0,
    };
    let mut nodes = vec![Node { parent: 0, step: None }];
    let mut visited: FnvHashMap<Vec<u8>, ()> = FnvHashMap::default();
    visited.insert(start.key(), ());
    let mut frontier = VecDeque::from([(0u32, 0usize, start)]);
    let mut transitions = 0u64;
    let mut max_depth = 0;
    let mut last = (0u32, Vec::new());

    while let Some((idx, depth, joint)) = frontier.pop_front() {
        if let Some(violation) = check_state(spec, &joint.replicas, &orders) {
            return Ok(Verdict::Counterexample(Trace {
                spec: spec.clone(),
                steps: trace_to(&nodes, idx),
                violation: Some(violation),
                fingerprint: fingerprint(&joint.replicas),
            }));
        }
        max_depth = max_depth.max(depth);
        last = (idx, joint.replicas.clone());
        for (step, next) in successors(spec, &joint)? {
            transitions += 1;
            let key = next.key();
            if visited.contains_key(&key) {
                continue;
            }
            if visited.len() >= spec.max_states {
                return Err(CheckError::BudgetTooLarge(format!(
                    "more than {} states",
                    spec.max_states
                )));
            }
            visited.insert(key, ());
            nodes.push(Node { parent: idx, step: Some(step) });
            frontier.push_back(((nodes.len() - 1) as u32, depth + 1, next));
        }
    }

    Ok(Verdict::Verified(Report {
        states: visited.len() as u64,
        transitions,
        max_depth,
        witness: Trace {
            spec: spec.clone(),
            steps: trace_to(&nodes, last.0),
            violation: None,
            fingerprint: fingerprint(&last.1),
        },
    }))
}

/// Re-executes `trace` from the spec's initial state and returns the final
/// replica states. Steps must satisfy their preconditions and stay within
/// the spec's budgets.
pub fn replay(trace: &Trace) -> Result<Vec<BoundedCounter>, CheckError> {
    let spec = &trace.spec;
    spec.check_limits()?;
    let mut replicas = spec.initial_states()?;
    let n = spec.replicas as u32;
    for (index, &step) in trace.steps.iter().enumerate() {
        let invalid = |reason: &str| CheckError::InvalidStep {
            index,
            step,
            reason: reason.to_owned(),
        };
        match step {
            Step::Update { replica, op } => {
                if replica >= n || matches!(op, UpdateOp::Transfer { to } if to >= n || to == replica) {
                    return Err(invalid("replica out of range"));
                }
                let ok = apply_update(spec, &mut replicas[replica as usize], replica, op)
                    .map_err(|e| invalid(&e.to_string()))?;
                if !ok {
                    return Err(invalid("not enough rights"));
                }
            }
            Step::Merge { into, from } => {
                if into >= n || from >= n || into == from {
                    return Err(invalid("replica out of range"));
                }
                let other = replicas[from as usize].clone();
                replicas[into as usize]
                    .merge(&other)
                    .map_err(|e| invalid(&e.to_string()))?;
            }
        }
    }
    Ok(replicas)
}

/// Replays `trace` and confirms that it reaches the recorded fingerprint and,
/// for counterexamples, the recorded violation.
pub fn confirm(trace: &Trace) -> Result<bool, CheckError> {
    let replicas = replay(trace)?;
    if fingerprint(&replicas) != trace.fingerprint {
        return Ok(false);
    }
    let found = check_state(&trace.spec, &replicas, &permutations(trace.spec.replicas));
    Ok(found == trace.violation)
}
