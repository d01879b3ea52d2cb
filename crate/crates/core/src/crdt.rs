//! The Bounded Counter replicated data type.
//!
//! A [`BoundedCounter`] is a state-based CRDT counter that preserves a numeric
//! bound (`value >= K` or `value <= K`) without coordinating on every update.
//! The slack between the value and the bound is split into *rights* held by
//! the replicas. A replica may only perform a bound-approaching update while it
//! holds enough rights, and rights move between replicas with [`transfer`].
//!
//! The state is a rights matrix `R` and a consumption vector `U`:
//!
//! * `R[i][i]` counts rights created at replica `i` (increments for a lower
//!   bound, decrements for an upper bound).
//! * `R[i][j]`, `i != j`, counts rights transferred from `i` to `j`.
//! * `U[i]` counts rights consumed at replica `i`.
//!
//! Every entry only grows, and merge is the entry-wise maximum, so the states
//! form a join semi-lattice. Row `i` of `R` and entry `U[i]` are only written
//! by replica `i`, which makes the rights a replica computes from its own copy
//! a conservative estimate of the rights it really holds.
//!
//! # Encoding
//!
//! [`BoundedCounter::encode`] produces a canonical byte string; equal states
//! always encode to identical bytes. All integers are little-endian.
//!
//! ```text
//! offset   size    field
//! 0        1       format version, 0x01
//! 1        1       polarity: 0 = lower bound, 1 = upper bound
//! 2        8       bound K (i64)
//! 10       4       replica count n (u32, >= 1)
//! 14       4       m, number of non-zero rights entries (u32)
//! 18       16*m    rights entries (from: u32, to: u32, amount: u64), sorted
//!                  by (from, to), every amount > 0
//! 18+16*m  8*n     consumed U[0..n] (u64 each)
//! ```
//!
//! [`transfer`]: BoundedCounter::transfer

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 18;
const ENTRY_LEN: usize = 16;

/// Dense index of a replica inside a counter's fixed replica set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ReplicaId {
    fn from(i: usize) -> Self {
        ReplicaId(i as u32)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Which side of the bound is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// `value >= bound`; rights permit decrements.
    Lower,
    /// `value <= bound`; rights permit increments.
    Upper,
}

impl Polarity {
    fn tag(self) -> u8 {
        match self {
            Polarity::Lower => 0,
            Polarity::Upper => 1,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Lower => f.write_str("lower"),
            Polarity::Upper => f.write_str("upper"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CounterError {
    #[error("initial value {initial} violates {polarity} bound {bound}")]
    InvalidBound {
        polarity: Polarity,
        bound: i64,
        initial: i64,
    },
    #[error("replica {replica} is outside a replica set of size {replicas}")]
    InvalidReplica { replica: ReplicaId, replicas: u32 },
    #[error("replica set must not be empty")]
    EmptyReplicaSet,
    #[error("{replica} holds {available} rights, {requested} needed")]
    NotEnoughRights {
        replica: ReplicaId,
        available: i64,
        requested: i64,
    },
    #[error("delta must be positive, got {0}")]
    NonPositiveDelta(i64),
    #[error("{0} cannot transfer rights to itself")]
    SelfTransfer(ReplicaId),
    #[error("counters differ in polarity, bound or replica count")]
    IncompatibleCounters,
    #[error("malformed counter encoding: {0}")]
    MalformedEncoding(&'static str),
    #[error("counter arithmetic overflow")]
    Overflow,
}

/// A counter that never crosses its bound, replicated over a fixed set of
/// replicas.
///
/// Updates take `&mut self` and leave the state untouched when they fail.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BoundedCounter {
    polarity: Polarity,
    bound: i64,
    replicas: u32,
    /// Sparse `R`; absent entries are zero and zero entries are never stored.
    rights: BTreeMap<(u32, u32), i64>,
    consumed: Vec<i64>,
}

impl fmt::Debug for BoundedCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundedCounter")
            .field("polarity", &self.polarity)
            .field("bound", &self.bound)
            .field("replicas", &self.replicas)
            .field("rights", &self.rights)
            .field("consumed", &self.consumed)
            .field("value", &self.value())
            .finish()
    }
}

impl BoundedCounter {
    /// Creates a counter whose value is `initial`. The slack `|initial - bound|`
    /// is created as rights held by `creator`.
    pub fn new(
        polarity: Polarity,
        bound: i64,
        replicas: usize,
        creator: ReplicaId,
        initial: i64,
    ) -> Result<Self, CounterError> {
        let mut counter = Self::empty(polarity, bound, replicas)?;
        counter.check_replica(creator)?;
        let slack = match polarity {
            Polarity::Lower => initial.checked_sub(bound),
            Polarity::Upper => bound.checked_sub(initial),
        }
        .ok_or(CounterError::Overflow)?;
        if slack < 0 {
            return Err(CounterError::InvalidBound {
                polarity,
                bound,
                initial,
            });
        }
        if slack > 0 {
            counter.create_rights(creator, slack)?;
        }
        Ok(counter)
    }

    /// The bottom state: value equal to the bound, no rights anywhere.
    pub fn empty(polarity: Polarity, bound: i64, replicas: usize) -> Result<Self, CounterError> {
        if replicas == 0 {
            return Err(CounterError::EmptyReplicaSet);
        }
        let replicas = u32::try_from(replicas).map_err(|_| CounterError::Overflow)?;
        Ok(BoundedCounter {
            polarity,
            bound,
            replicas,
            rights: BTreeMap::new(),
            consumed: vec![0; replicas as usize],
        })
    }

    /// Builds a state directly from its matrix entries. `rights` lists
    /// `(from, to, amount)` triples; repeated coordinates are summed.
    pub fn from_parts(
        polarity: Polarity,
        bound: i64,
        rights: &[(u32, u32, i64)],
        consumed: &[i64],
    ) -> Result<Self, CounterError> {
        let mut counter = Self::empty(polarity, bound, consumed.len())?;
        for &(from, to, amount) in rights {
            counter.check_replica(ReplicaId(from))?;
            counter.check_replica(ReplicaId(to))?;
            if amount < 0 {
                return Err(CounterError::NonPositiveDelta(amount));
            }
            if amount > 0 {
                let entry = counter.rights.entry((from, to)).or_insert(0);
                *entry = entry.checked_add(amount).ok_or(CounterError::Overflow)?;
            }
        }
        for (slot, &used) in counter.consumed.iter_mut().zip(consumed) {
            if used < 0 {
                return Err(CounterError::NonPositiveDelta(used));
            }
            *slot = used;
        }
        counter.checked_value()?;
        Ok(counter)
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn bound(&self) -> i64 {
        self.bound
    }

    pub fn replicas(&self) -> usize {
        self.replicas as usize
    }

    pub fn replica_ids(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.replicas).map(ReplicaId)
    }

    /// `R[from][to]`.
    pub fn rights_entry(&self, from: ReplicaId, to: ReplicaId) -> i64 {
        self.rights.get(&(from.0, to.0)).copied().unwrap_or(0)
    }

    /// `U[replica]`.
    pub fn consumed_entry(&self, replica: ReplicaId) -> i64 {
        self.consumed.get(replica.index()).copied().unwrap_or(0)
    }

    /// Current value of the counter as seen by this state.
    pub fn value(&self) -> i64 {
        // Every constructor and update verifies the value fits.
        self.checked_value().expect("counter value within i64")
    }

    fn value_wide(&self) -> i128 {
        let created: i128 = self
            .rights
            .iter()
            .filter(|((i, j), _)| i == j)
            .map(|(_, &v)| v as i128)
            .sum();
        let used: i128 = self.consumed.iter().map(|&v| v as i128).sum();
        match self.polarity {
            Polarity::Lower => self.bound as i128 + created - used,
            Polarity::Upper => self.bound as i128 - created + used,
        }
    }

    fn checked_value(&self) -> Result<i64, CounterError> {
        i64::try_from(self.value_wide()).map_err(|_| CounterError::Overflow)
    }

    /// Rights held by `replica` according to this state.
    pub fn local_rights(&self, replica: ReplicaId) -> Result<i64, CounterError> {
        self.check_replica(replica)?;
        Ok(self.rights_of(replica))
    }

    fn rights_of(&self, replica: ReplicaId) -> i64 {
        let me = replica.0;
        let mut total: i128 = -(self.consumed[replica.index()] as i128);
        for (&(from, to), &amount) in &self.rights {
            if to == me {
                // Covers R[i][i] and transfers received.
                total += amount as i128;
            } else if from == me {
                total -= amount as i128;
            }
        }
        total.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }

    /// Adds `delta` to the value, acting at replica `at`.
    pub fn increment(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        check_delta(delta)?;
        self.check_replica(at)?;
        match self.polarity {
            Polarity::Lower => self.create_rights(at, delta),
            Polarity::Upper => self.consume_rights(at, delta),
        }
    }

    /// Subtracts `delta` from the value, acting at replica `at`.
    pub fn decrement(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        check_delta(delta)?;
        self.check_replica(at)?;
        match self.polarity {
            Polarity::Lower => self.consume_rights(at, delta),
            Polarity::Upper => self.create_rights(at, delta),
        }
    }

    /// Moves `delta` rights from `from` to `to`. Must be executed at `from`.
    /// All-or-nothing: fails without effect when `from` holds fewer rights.
    pub fn transfer(
        &mut self,
        from: ReplicaId,
        to: ReplicaId,
        delta: i64,
    ) -> Result<(), CounterError> {
        check_delta(delta)?;
        self.check_replica(from)?;
        self.check_replica(to)?;
        if from == to {
            return Err(CounterError::SelfTransfer(from));
        }
        self.require_rights(from, delta)?;
        let entry = self.rights_entry(from, to);
        let updated = entry.checked_add(delta).ok_or(CounterError::Overflow)?;
        self.rights.insert((from.0, to.0), updated);
        Ok(())
    }

    /// Rights-free consumption used by the model checker's mutant. Never call
    /// this from real code paths: it can break the bound.
    #[doc(hidden)]
    pub fn consume_unchecked(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        check_delta(delta)?;
        self.check_replica(at)?;
        self.bump_consumed(at, delta)
    }

    /// Joins `other` into `self` (entry-wise maximum).
    pub fn merge(&mut self, other: &BoundedCounter) -> Result<(), CounterError> {
        self.check_compatible(other)?;
        let mut joined = self.clone();
        for (&key, &amount) in &other.rights {
            let entry = joined.rights.entry(key).or_insert(0);
            *entry = (*entry).max(amount);
        }
        for (mine, &theirs) in joined.consumed.iter_mut().zip(&other.consumed) {
            *mine = (*mine).max(theirs);
        }
        joined.checked_value()?;
        *self = joined;
        Ok(())
    }

    /// Returns the join of `self` and `other` without modifying either.
    pub fn merged(&self, other: &BoundedCounter) -> Result<BoundedCounter, CounterError> {
        let mut out = self.clone();
        out.merge(other)?;
        Ok(out)
    }

    /// Entry-wise `self <= other`.
    pub fn leq(&self, other: &BoundedCounter) -> Result<bool, CounterError> {
        self.check_compatible(other)?;
        let rights_leq = self
            .rights
            .iter()
            .all(|(key, &amount)| amount <= other.rights.get(key).copied().unwrap_or(0));
        let consumed_leq = self.consumed.iter().zip(&other.consumed).all(|(a, b)| a <= b);
        Ok(rights_leq && consumed_leq)
    }

    /// True when both states describe the same counter (polarity, bound and
    /// replica count agree).
    pub fn same_identity(&self, other: &BoundedCounter) -> bool {
        self.polarity == other.polarity
            && self.bound == other.bound
            && self.replicas == other.replicas
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + ENTRY_LEN * self.rights.len() + 8 * self.consumed.len());
        out.push(FORMAT_VERSION);
        out.push(self.polarity.tag());
        out.extend_from_slice(&self.bound.to_le_bytes());
        out.extend_from_slice(&self.replicas.to_le_bytes());
        out.extend_from_slice(&(self.rights.len() as u32).to_le_bytes());
        for (&(from, to), &amount) in &self.rights {
            out.extend_from_slice(&from.to_le_bytes());
            out.extend_from_slice(&to.to_le_bytes());
            out.extend_from_slice(&(amount as u64).to_le_bytes());
        }
        for &used in &self.consumed {
            out.extend_from_slice(&(used as u64).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CounterError> {
        let mut reader = Reader { bytes, pos: 0 };
        if reader.u8()? != FORMAT_VERSION {
            return Err(CounterError::MalformedEncoding("unknown format version"));
        }
        let polarity = match reader.u8()? {
            0 => Polarity::Lower,
            1 => Polarity::Upper,
            _ => return Err(CounterError::MalformedEncoding("unknown polarity")),
        };
        let bound = reader.u64()? as i64;
        let replicas = reader.u32()?;
        if replicas == 0 {
            return Err(CounterError::MalformedEncoding("empty replica set"));
        }
        let entries = reader.u32()? as usize;
        let expected_len = (entries as u128) * ENTRY_LEN as u128
            + (replicas as u128) * 8
            + HEADER_LEN as u128;
        if expected_len != bytes.len() as u128 {
            return Err(CounterError::MalformedEncoding("length mismatch"));
        }
        let mut rights = BTreeMap::new();
        let mut previous: Option<(u32, u32)> = None;
        for _ in 0..entries {
            let from = reader.u32()?;
            let to = reader.u32()?;
            let amount = reader.u64()?;
            if from >= replicas || to >= replicas {
                return Err(CounterError::MalformedEncoding("replica index out of range"));
            }
            if previous.is_some_and(|p| p >= (from, to)) {
                return Err(CounterError::MalformedEncoding("rights entries not sorted"));
            }
            if amount == 0 || amount > i64::MAX as u64 {
                return Err(CounterError::MalformedEncoding("rights amount out of range"));
            }
            previous = Some((from, to));
            rights.insert((from, to), amount as i64);
        }
        let mut consumed = Vec::with_capacity(replicas as usize);
        for _ in 0..replicas {
            let used = reader.u64()?;
            if used > i64::MAX as u64 {
                return Err(CounterError::MalformedEncoding("consumed amount out of range"));
            }
            consumed.push(used as i64);
        }
        let counter = BoundedCounter {
            polarity,
            bound,
            replicas,
            rights,
            consumed,
        };
        counter
            .checked_value()
            .map_err(|_| CounterError::MalformedEncoding("value out of range"))?;
        Ok(counter)
    }

    fn create_rights(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        let entry = self.rights_entry(at, at);
        let updated = entry.checked_add(delta).ok_or(CounterError::Overflow)?;
        let previous = self.rights.insert((at.0, at.0), updated);
        if self.checked_value().is_err() {
            match previous {
                Some(v) => self.rights.insert((at.0, at.0), v),
                None => self.rights.remove(&(at.0, at.0)),
            };
            return Err(CounterError::Overflow);
        }
        Ok(())
    }

    fn consume_rights(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        self.require_rights(at, delta)?;
        self.bump_consumed(at, delta)
    }

    fn bump_consumed(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        let slot = &mut self.consumed[at.index()];
        let previous = *slot;
        *slot = previous.checked_add(delta).ok_or(CounterError::Overflow)?;
        if self.checked_value().is_err() {
            self.consumed[at.index()] = previous;
            return Err(CounterError::Overflow);
        }
        Ok(())
    }

    fn require_rights(&self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        let available = self.rights_of(at);
        if available < delta {
            return Err(CounterError::NotEnoughRights {
                replica: at,
                available,
                requested: delta,
            });
        }
        Ok(())
    }

    fn check_replica(&self, replica: ReplicaId) -> Result<(), CounterError> {
        if replica.0 >= self.replicas {
            return Err(CounterError::InvalidReplica {
                replica,
                replicas: self.replicas,
            });
        }
        Ok(())
    }

    fn check_compatible(&self, other: &BoundedCounter) -> Result<(), CounterError> {
        if self.same_identity(other) {
            Ok(())
        } else {
            Err(CounterError::IncompatibleCounters)
        }
    }
}

fn check_delta(delta: i64) -> Result<(), CounterError> {
    if delta <= 0 {
        Err(CounterError::NonPositiveDelta(delta))
    } else {
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CounterError> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(CounterError::MalformedEncoding("truncated"))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8, CounterError> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, CounterError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, CounterError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

/// A counter constrained to `lower <= value <= upper`, built from one
/// lower-bound and one upper-bound [`BoundedCounter`] that are always updated
/// together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeCounter {
    lower: BoundedCounter,
    upper: BoundedCounter,
}

impl RangeCounter {
    pub fn new(
        lower_bound: i64,
        upper_bound: i64,
        replicas: usize,
        creator: ReplicaId,
        initial: i64,
    ) -> Result<Self, CounterError> {
        if lower_bound > upper_bound {
            return Err(CounterError::InvalidBound {
                polarity: Polarity::Upper,
                bound: upper_bound,
                initial: lower_bound,
            });
        }
        Ok(RangeCounter {
            lower: BoundedCounter::new(Polarity::Lower, lower_bound, replicas, creator, initial)?,
            upper: BoundedCounter::new(Polarity::Upper, upper_bound, replicas, creator, initial)?,
        })
    }

    pub fn value(&self) -> i64 {
        self.lower.value()
    }

    pub fn lower(&self) -> &BoundedCounter {
        &self.lower
    }

    pub fn upper(&self) -> &BoundedCounter {
        &self.upper
    }

    /// Rights to decrement and rights to increment held by `replica`.
    pub fn local_rights(&self, replica: ReplicaId) -> Result<(i64, i64), CounterError> {
        Ok((self.lower.local_rights(replica)?, self.upper.local_rights(replica)?))
    }

    pub fn increment(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        self.update_both(|c| c.increment(at, delta))
    }

    pub fn decrement(&mut self, at: ReplicaId, delta: i64) -> Result<(), CounterError> {
        self.update_both(|c| c.decrement(at, delta))
    }

    /// Transfers rights of one component: `Polarity::Lower` moves decrement
    /// rights, `Polarity::Upper` moves increment rights.
    pub fn transfer(
        &mut self,
        rights: Polarity,
        from: ReplicaId,
        to: ReplicaId,
        delta: i64,
    ) -> Result<(), CounterError> {
        match rights {
            Polarity::Lower => self.lower.transfer(from, to, delta),
            Polarity::Upper => self.upper.transfer(from, to, delta),
        }
    }

    pub fn merge(&mut self, other: &RangeCounter) -> Result<(), CounterError> {
        let lower = self.lower.merged(&other.lower)?;
        let upper = self.upper.merged(&other.upper)?;
        self.lower = lower;
        self.upper = upper;
        Ok(())
    }

    fn update_both(
        &mut self,
        op: impl Fn(&mut BoundedCounter) -> Result<(), CounterError>,
    ) -> Result<(), CounterError> {
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        op(&mut lower)?;
        op(&mut upper)?;
        self.lower = lower;
        self.upper = upper;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u32) -> ReplicaId {
        ReplicaId(i)
    }

    /// The worked example: bound 10, created with value 40 at r0, 10 rights
    /// sent from r0 to each of r1 and r2, one increment at r1 and 5/4/2
    /// decrements at r0/r1/r2.
    fn worked_example() -> BoundedCounter {
        BoundedCounter::from_parts(
            Polarity::Lower,
            10,
            &[(0, 0, 30), (0, 1, 10), (0, 2, 10), (1, 1, 1)],
            &[5, 4, 2],
        )
        .unwrap()
    }

    #[test]
    fn creation_assigns_slack_to_creator() {
        let c = BoundedCounter::new(Polarity::Lower, 10, 3, r(0), 40).unwrap();
        assert_eq!(c.rights_entry(r(0), r(0)), 30);
        assert_eq!(c.rights.len(), 1);
        assert_eq!(c.consumed, vec![0, 0, 0]);
        assert_eq!(c.value(), 40);
    }

    #[test]
    fn zero_slack_creation() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 2, r(0), 0).unwrap();
        assert_eq!(c, BoundedCounter::empty(Polarity::Lower, 0, 2).unwrap());
        assert_eq!(c.value(), 0);
        assert_eq!(c.local_rights(r(0)).unwrap(), 0);
    }

    #[test]
    fn upper_creation_is_dual() {
        let c = BoundedCounter::new(Polarity::Upper, 100, 3, r(1), 90).unwrap();
        assert_eq!(c.rights_entry(r(1), r(1)), 10);
        assert_eq!(c.local_rights(r(1)).unwrap(), 10);
        assert_eq!(c.local_rights(r(0)).unwrap(), 0);
        assert_eq!(c.value(), 90);
    }

    #[test]
    fn creation_errors() {
        assert_eq!(
            BoundedCounter::new(Polarity::Lower, 10, 3, r(0), 9),
            Err(CounterError::InvalidBound {
                polarity: Polarity::Lower,
                bound: 10,
                initial: 9
            })
        );
        assert!(matches!(
            BoundedCounter::new(Polarity::Upper, 10, 3, r(0), 11),
            Err(CounterError::InvalidBound { .. })
        ));
        assert!(matches!(
            BoundedCounter::new(Polarity::Lower, 0, 3, r(3), 5),
            Err(CounterError::InvalidReplica { .. })
        ));
        assert_eq!(
            BoundedCounter::new(Polarity::Lower, 0, 0, r(0), 5),
            Err(CounterError::EmptyReplicaSet)
        );
    }

    #[test]
    fn worked_example_queries() {
        let c = worked_example();
        assert_eq!(c.value(), 30);
        assert_eq!(c.local_rights(r(0)).unwrap(), 5);
        assert_eq!(c.local_rights(r(1)).unwrap(), 7);
        assert_eq!(c.local_rights(r(2)).unwrap(), 8);
        assert!(matches!(
            c.local_rights(r(3)),
            Err(CounterError::InvalidReplica { .. })
        ));
    }

    #[test]
    fn fresh_counter_value_is_bound() {
        let c = BoundedCounter::new(Polarity::Lower, -7, 4, r(2), -7).unwrap();
        assert_eq!(c.value(), -7);
        for id in c.replica_ids() {
            assert_eq!(c.local_rights(id).unwrap(), 0);
        }
    }

    #[test]
    fn increment_creates_rights() {
        let mut c = worked_example();
        c.increment(r(1), 1).unwrap();
        assert_eq!(c.rights_entry(r(1), r(1)), 2);
        assert_eq!(c.value(), 31);
        assert_eq!(c.local_rights(r(1)).unwrap(), 8);

        let mut before = worked_example();
        before.rights.remove(&(1, 1));
        before.increment(r(1), 1).unwrap();
        assert_eq!(before, worked_example());
    }

    #[test]
    fn upper_increment_needs_rights() {
        let mut c = BoundedCounter::new(Polarity::Upper, 100, 2, r(0), 97).unwrap();
        assert_eq!(c.local_rights(r(0)).unwrap(), 3);
        let before = c.clone();
        assert_eq!(
            c.increment(r(0), 4),
            Err(CounterError::NotEnoughRights {
                replica: r(0),
                available: 3,
                requested: 4
            })
        );
        assert_eq!(c, before);
        c.increment(r(0), 3).unwrap();
        assert_eq!(c.value(), 100);
        assert_eq!(c.consumed_entry(r(0)), 3);
        // Decrement creates increment rights.
        c.decrement(r(1), 5).unwrap();
        assert_eq!(c.value(), 95);
        assert_eq!(c.local_rights(r(1)).unwrap(), 5);
    }

    #[test]
    fn decrement_consumes_rights() {
        let mut c = worked_example();
        c.decrement(r(0), 5).unwrap();
        assert_eq!(c.consumed_entry(r(0)), 10);
        assert_eq!(c.local_rights(r(0)).unwrap(), 0);
        assert_eq!(c.value(), 25);
    }

    #[test]
    fn decrement_beyond_rights_fails_without_effect() {
        let mut c = worked_example();
        assert!(matches!(
            c.decrement(r(0), 6),
            Err(CounterError::NotEnoughRights { available: 5, .. })
        ));
        assert_eq!(c, worked_example());

        let mut fresh = BoundedCounter::new(Polarity::Lower, 0, 2, r(0), 0).unwrap();
        assert!(matches!(
            fresh.decrement(r(1), 1),
            Err(CounterError::NotEnoughRights { .. })
        ));
    }

    #[test]
    fn non_positive_delta_rejected() {
        let mut c = worked_example();
        assert_eq!(c.increment(r(0), 0), Err(CounterError::NonPositiveDelta(0)));
        assert_eq!(c.decrement(r(0), -1), Err(CounterError::NonPositiveDelta(-1)));
        assert_eq!(
            c.transfer(r(0), r(1), 0),
            Err(CounterError::NonPositiveDelta(0))
        );
        assert_eq!(c, worked_example());
    }

    #[test]
    fn transfer_moves_rights() {
        let mut c = worked_example();
        c.transfer(r(0), r(1), 3).unwrap();
        assert_eq!(c.rights_entry(r(0), r(1)), 13);
        assert_eq!(c.local_rights(r(0)).unwrap(), 2);
        assert_eq!(c.local_rights(r(1)).unwrap(), 10);
        assert_eq!(c.value(), 30);
    }

    #[test]
    fn transfer_errors() {
        let mut c = worked_example();
        assert!(matches!(
            c.transfer(r(0), r(1), 6),
            Err(CounterError::NotEnoughRights { available: 5, .. })
        ));
        assert_eq!(c.transfer(r(1), r(1), 1), Err(CounterError::SelfTransfer(r(1))));
        assert!(matches!(
            c.transfer(r(1), r(5), 1),
            Err(CounterError::InvalidReplica { .. })
        ));
        assert_eq!(c, worked_example());
    }

    #[test]
    fn merge_examples() {
        let s = worked_example();
        assert_eq!(s.merged(&s).unwrap(), s);
        let bottom = BoundedCounter::empty(Polarity::Lower, 10, 3).unwrap();
        assert_eq!(s.merged(&bottom).unwrap(), s);

        let mut s1 = worked_example();
        s1.consumed[1] = 6;
        let mut s2 = worked_example();
        s2.rights.insert((2, 2), 4);
        let joined = s1.merged(&s2).unwrap();
        let expected = BoundedCounter::from_parts(
            Polarity::Lower,
            10,
            &[(0, 0, 30), (0, 1, 10), (0, 2, 10), (1, 1, 1), (2, 2, 4)],
            &[5, 6, 2],
        )
        .unwrap();
        assert_eq!(joined, expected);
        assert_eq!(joined.value(), 32);
    }

    #[test]
    fn merge_rejects_other_counters() {
        let mut a = worked_example();
        let b = BoundedCounter::empty(Polarity::Lower, 11, 3).unwrap();
        let c = BoundedCounter::empty(Polarity::Upper, 10, 3).unwrap();
        let d = BoundedCounter::empty(Polarity::Lower, 10, 4).unwrap();
        for other in [b, c, d] {
            assert_eq!(a.merge(&other), Err(CounterError::IncompatibleCounters));
            assert_eq!(a.leq(&other), Err(CounterError::IncompatibleCounters));
        }
        assert_eq!(a, worked_example());
    }

    #[test]
    fn leq_examples() {
        let s = worked_example();
        assert!(s.leq(&s).unwrap());
        let mut after = s.clone();
        after.decrement(r(1), 1).unwrap();
        assert!(s.leq(&after).unwrap());
        assert!(!after.leq(&s).unwrap());

        let mut a = s.clone();
        a.decrement(r(0), 1).unwrap();
        let mut b = s.clone();
        b.decrement(r(2), 1).unwrap();
        let j = a.merged(&b).unwrap();
        assert!(!j.leq(&a).unwrap());
        assert!(a.leq(&j).unwrap() && b.leq(&j).unwrap());
    }

    #[test]
    fn encode_round_trip_and_layout() {
        let c = worked_example();
        let bytes = c.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * ENTRY_LEN + 3 * 8);
        assert_eq!(&bytes[..2], &[1, 0]);
        assert_eq!(i64::from_le_bytes(bytes[2..10].try_into().unwrap()), 10);
        assert_eq!(BoundedCounter::decode(&bytes).unwrap(), c);
        assert_eq!(c.clone().encode(), bytes);
    }

    #[test]
    fn decode_rejects_malformed_input() {
        let bytes = worked_example().encode();
        for cut in [0, 1, 5, 17, bytes.len() - 1] {
            assert!(matches!(
                BoundedCounter::decode(&bytes[..cut]),
                Err(CounterError::MalformedEncoding(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(BoundedCounter::decode(&extra).is_err());

        let mut bad_version = bytes.clone();
        bad_version[0] = 9;
        assert!(BoundedCounter::decode(&bad_version).is_err());

        // Swap the first two entries so they are out of order.
        let mut unsorted = bytes.clone();
        let (a, b) = (HEADER_LEN, HEADER_LEN + ENTRY_LEN);
        let first: Vec<u8> = unsorted[a..b].to_vec();
        let second: Vec<u8> = unsorted[b..b + ENTRY_LEN].to_vec();
        unsorted[a..b].copy_from_slice(&second);
        unsorted[b..b + ENTRY_LEN].copy_from_slice(&first);
        assert_eq!(
            BoundedCounter::decode(&unsorted),
            Err(CounterError::MalformedEncoding("rights entries not sorted"))
        );

        let mut zero_entry = bytes;
        zero_entry[HEADER_LEN + 8..HEADER_LEN + 16].copy_from_slice(&0u64.to_le_bytes());
        assert!(BoundedCounter::decode(&zero_entry).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut c = BoundedCounter::new(Polarity::Lower, 0, 2, r(0), i64::MAX).unwrap();
        let before = c.clone();
        assert_eq!(c.increment(r(1), 1), Err(CounterError::Overflow));
        assert_eq!(c, before);
        assert_eq!(
            BoundedCounter::new(Polarity::Lower, i64::MIN, 2, r(0), 1),
            Err(CounterError::Overflow)
        );
    }

    #[test]
    fn range_counter_keeps_both_bounds() {
        let mut c = RangeCounter::new(0, 10, 2, r(0), 4).unwrap();
        assert_eq!(c.local_rights(r(0)).unwrap(), (4, 6));
        c.increment(r(0), 6).unwrap();
        assert_eq!(c.value(), 10);
        let before = c.clone();
        assert!(matches!(
            c.increment(r(0), 1),
            Err(CounterError::NotEnoughRights { .. })
        ));
        assert_eq!(c, before);
        c.transfer(Polarity::Lower, r(0), r(1), 3).unwrap();
        c.decrement(r(1), 3).unwrap();
        assert!(matches!(
            c.decrement(r(1), 1),
            Err(CounterError::NotEnoughRights { .. })
        ));
        assert_eq!(c.value(), 7);
        assert_eq!(c.lower().value(), c.upper().value());
        assert!(RangeCounter::new(5, 4, 2, r(0), 4).is_err());
    }

    #[test]
    fn range_counter_merge() {
        let base = RangeCounter::new(0, 100, 2, r(0), 50).unwrap();
        let mut a = base.clone();
        a.decrement(r(0), 5).unwrap();
        let mut b = base.clone();
        b.transfer(Polarity::Upper, r(0), r(1), 10).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.value(), 45);
        assert_eq!(a.local_rights(r(1)).unwrap(), (0, 10));
        assert_eq!(a.lower().value(), a.upper().value());
    }
}
