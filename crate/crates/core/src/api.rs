//! The counter operations exposed to applications and their outcomes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crdt::{BoundedCounter, CounterError, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Inc,
    Dec,
}

/// Whether an operation that lacks local rights may contact other replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpFlag {
    /// Never leave the local data center.
    Local,
    /// Fetch missing rights synchronously from other data centers.
    #[default]
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CounterOp {
    pub kind: OpKind,
    pub delta: i64,
}

impl CounterOp {
    pub fn inc(delta: i64) -> Self {
        CounterOp {
            kind: OpKind::Inc,
            delta,
        }
    }

    pub fn dec(delta: i64) -> Self {
        CounterOp {
            kind: OpKind::Dec,
            delta,
        }
    }

    pub fn apply(self, counter: &mut BoundedCounter, at: ReplicaId) -> Result<(), CounterError> {
        match self.kind {
            OpKind::Inc => counter.increment(at, self.delta),
            OpKind::Dec => counter.decrement(at, self.delta),
        }
    }

    /// Signed effect on the counter's value.
    pub fn effect(self) -> i64 {
        match self.kind {
            OpKind::Inc => self.delta,
            OpKind::Dec => -self.delta,
        }
    }
}

impl fmt::Display for CounterOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OpKind::Inc => write!(f, "inc({})", self.delta),
            OpKind::Dec => write!(f, "dec({})", self.delta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpStatus {
    Ok,
    Fail,
    Retry,
}

/// Why an operation did not return `Ok`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    /// Not enough rights, locally or (for global operations) anywhere reachable.
    NotEnoughRights,
    /// A baseline's read showed the update would cross the bound.
    BoundReached,
    /// The conditional write lost a race.
    Conflict,
    RetriesExhausted,
    /// The owner changed while the request was in flight.
    StaleOwner,
    Timeout,
    NotFound,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpResult {
    pub status: OpStatus,
    /// For `Retry` caused by missing rights: other replicas visibly hold
    /// enough rights, so a global attempt is likely to succeed.
    pub hint: bool,
    pub reason: Option<FailReason>,
}

impl OpResult {
    pub fn ok() -> Self {
        OpResult {
            status: OpStatus::Ok,
            hint: false,
            reason: None,
        }
    }

    pub fn fail(reason: FailReason) -> Self {
        OpResult {
            status: OpStatus::Fail,
            hint: false,
            reason: Some(reason),
        }
    }

    pub fn retry(reason: FailReason) -> Self {
        OpResult {
            status: OpStatus::Retry,
            hint: false,
            reason: Some(reason),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == OpStatus::Ok
    }

    /// Outcome of a local-only operation that lacked rights: `Retry` with a
    /// hint when some other replica visibly holds at least the missing rights.
    pub fn lacking_rights(view: &BoundedCounter, me: ReplicaId, op: CounterOp) -> Self {
        if retry_hint(view, me, op) {
            OpResult {
                status: OpStatus::Retry,
                hint: true,
                reason: Some(FailReason::NotEnoughRights),
            }
        } else {
            OpResult::fail(FailReason::NotEnoughRights)
        }
    }
}

/// Some remote replica's rights, as visible in `view`, cover the deficit of
/// `op` at `me`.
pub fn retry_hint(view: &BoundedCounter, me: ReplicaId, op: CounterOp) -> bool {
    let Ok(mine) = view.local_rights(me) else {
        return false;
    };
    let deficit = op.delta - mine;
    view.replica_ids()
        .filter(|&r| r != me)
        .any(|r| view.local_rights(r).unwrap_or(0) >= deficit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::Polarity;

    #[test]
    fn hint_follows_remote_rights() {
        let mut c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        c.transfer(ReplicaId(0), ReplicaId(1), 2).unwrap();
        // r1 holds 2 and wants 5: r0 visibly holds 8 >= 3.
        let r = OpResult::lacking_rights(&c, ReplicaId(1), CounterOp::dec(5));
        assert_eq!(r.status, OpStatus::Retry);
        assert!(r.hint);
        // r2 holds 0 and wants 9: nobody holds 9.
        let r = OpResult::lacking_rights(&c, ReplicaId(2), CounterOp::dec(9));
        assert_eq!(r, OpResult::fail(FailReason::NotEnoughRights));
    }
}
