//! Per-data-center key-value store with siblings, versions and conditional writes.
//!
//! Keys are either weakly or strongly consistent, fixed by the first write:
//!
//! * Weak keys accept every [`Store::put`]. A put whose context is the current
//!   version replaces the value; any other put is concurrent with it and the
//!   value is kept as an extra sibling for the next reader to merge.
//! * Strong keys only accept [`Store::put_conditional`], which succeeds when
//!   the caller's expected version matches the current one. Strong keys always
//!   hold exactly one sibling and are never replicated by the store.
//!
//! Versions are per-store integers, so writes to one key are totally ordered
//! inside one data center.
//!
//! [`StoreTiming`] models write latency: writes to one key are serviced one
//! after the other, each holding the key for `write_service_ms` and completing
//! `write_ms` after it starts.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimTime, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version(pub u64);

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consistency {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedRecord {
    pub key: String,
    /// Never empty. Strong records hold exactly one entry.
    pub siblings: Vec<Vec<u8>>,
    pub version: Version,
    pub consistency: Consistency,
}

impl VersionedRecord {
    /// The value of a single-sibling record.
    pub fn value(&self) -> &[u8] {
        &self.siblings[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("key {0:?} not found")]
    NotFound(String),
    #[error("key {key:?} is {consistency:?}; wrong write mode")]
    WrongMode { key: String, consistency: Consistency },
    #[error("conditional write on {key:?} expected {expected:?}, found {current:?}")]
    Conflict {
        key: String,
        expected: Option<Version>,
        current: Option<Version>,
    },
}

/// A request to the store, as issued by the middlewares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreCall {
    Get {
        key: String,
    },
    Put {
        key: String,
        value: Vec<u8>,
        context: Option<Version>,
    },
    PutConditional {
        key: String,
        value: Vec<u8>,
        expected: Option<Version>,
    },
}

impl StoreCall {
    pub fn key(&self) -> &str {
        match self {
            StoreCall::Get { key }
            | StoreCall::Put { key, .. }
            | StoreCall::PutConditional { key, .. } => key,
        }
    }

    pub fn is_write(&self) -> bool {
        !matches!(self, StoreCall::Get { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreReply {
    Get(Result<VersionedRecord, StoreError>),
    Put(Result<Version, StoreError>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub reads: u64,
    pub writes: u64,
    pub conditional_writes: u64,
    pub conflicts: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Store {
    records: BTreeMap<String, VersionedRecord>,
    last_version: u64,
    busy_until: BTreeMap<String, SimTime>,
    stats: StoreStats,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> StoreStats {
        self.stats
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn get(&mut self, key: &str) -> Result<VersionedRecord, StoreError> {
        self.stats.reads += 1;
        self.peek(key).cloned()
    }

    /// Reads without touching the statistics.
    pub fn peek(&self, key: &str) -> Result<&VersionedRecord, StoreError> {
        self.records
            .get(key)
            .ok_or_else(|| StoreError::NotFound(key.to_owned()))
    }

    /// Weak write. `context` is the version the writer based its value on.
    pub fn put(
        &mut self,
        key: &str,
        value: Vec<u8>,
        context: Option<Version>,
    ) -> Result<Version, StoreError> {
        let version = self.next_version();
        match self.records.get_mut(key) {
            Some(record) if record.consistency == Consistency::Strong => {
                return Err(StoreError::WrongMode {
                    key: key.to_owned(),
                    consistency: Consistency::Strong,
                })
            }
            Some(record) => {
                if context == Some(record.version) {
                    record.siblings = vec![value];
                } else if !record.siblings.contains(&value) {
                    record.siblings.push(value);
                }
                record.version = version;
            }
            None => {
                self.records.insert(
                    key.to_owned(),
                    VersionedRecord {
                        key: key.to_owned(),
                        siblings: vec![value],
                        version,
                        consistency: Consistency::Weak,
                    },
                );
            }
        }
        self.stats.writes += 1;
        Ok(version)
    }

    /// Strong write: succeeds only if the key's current version equals
    /// `expected` (`None` meaning the key must not exist yet).
    pub fn put_conditional(
        &mut self,
        key: &str,
        value: Vec<u8>,
        expected: Option<Version>,
    ) -> Result<Version, StoreError> {
        let current = self.records.get(key);
        if let Some(record) = current {
            if record.consistency == Consistency::Weak {
                return Err(StoreError::WrongMode {
                    key: key.to_owned(),
                    consistency: Consistency::Weak,
                });
            }
        }
        self.stats.writes += 1;
        self.stats.conditional_writes += 1;
        let current_version = current.map(|r| r.version);
        if current_version != expected {
            self.stats.conflicts += 1;
            return Err(StoreError::Conflict {
                key: key.to_owned(),
                expected,
                current: current_version,
            });
        }
        let version = self.next_version();
        self.records.insert(
            key.to_owned(),
            VersionedRecord {
                key: key.to_owned(),
                siblings: vec![value],
                version,
                consistency: Consistency::Strong,
            },
        );
        Ok(version)
    }

    pub fn execute(&mut self, call: &StoreCall) -> StoreReply {
        match call {
            StoreCall::Get { key } => StoreReply::Get(self.get(key)),
            StoreCall::Put {
                key,
                value,
                context,
            } => StoreReply::Put(self.put(key, value.clone(), *context)),
            StoreCall::PutConditional {
                key,
                value,
                expected,
            } => StoreReply::Put(self.put_conditional(key, value.clone(), *expected)),
        }
    }

    /// Reserves the key's write slot for a write arriving at `arrival` and
    /// returns the instant the write takes effect.
    pub fn reserve_write(
        &mut self,
        key: &str,
        arrival: SimTime,
        timing: &StoreTiming,
        jitter: Span,
    ) -> SimTime {
        let slot = self.busy_until.entry(key.to_owned()).or_insert(SimTime::ZERO);
        let start = (*slot).max(arrival);
        *slot = start + Span::from_ms(timing.write_service_ms);
        start + Span::from_ms(timing.write_ms) + jitter
    }

    fn next_version(&mut self) -> Version {
        self.last_version += 1;
        Version(self.last_version)
    }
}

/// Latency model of one data center's store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreTiming {
    /// Read round trip (a single replica answers).
    pub read_ms: f64,
    /// Write round trip (quorum write) once the write has started.
    pub write_ms: f64,
    /// How long one write occupies its key before the next may start.
    pub write_service_ms: f64,
    /// Uniform extra delay in `[0, jitter_ms]` on every read and write.
    pub jitter_ms: f64,
}

impl Default for StoreTiming {
    fn default() -> Self {
        StoreTiming {
            read_ms: 1.0,
            write_ms: 8.0,
            write_service_ms: 2.0,
            jitter_ms: 0.5,
        }
    }
}

impl StoreTiming {
    pub fn jitter(&self, rng: &mut impl Rng) -> Span {
        if self.jitter_ms <= 0.0 {
            Span::ZERO
        } else {
            Span::from_ms(rng.gen_range(0.0..=self.jitter_ms))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_after_put() {
        let mut s = Store::new();
        s.put("k", b"v".to_vec(), None).unwrap();
        let rec = s.get("k").unwrap();
        assert_eq!(rec.siblings, vec![b"v".to_vec()]);
        assert_eq!(rec.consistency, Consistency::Weak);
    }

    #[test]
    fn get_missing_key() {
        let mut s = Store::new();
        assert_eq!(s.get("nope"), Err(StoreError::NotFound("nope".into())));
    }

    #[test]
    fn concurrent_weak_puts_become_siblings() {
        let mut s = Store::new();
        let v0 = s.put("k", b"base".to_vec(), None).unwrap();
        // Two clients read v0 and write concurrently.
        s.put("k", b"a".to_vec(), Some(v0)).unwrap();
        s.put("k", b"b".to_vec(), Some(v0)).unwrap();
        let rec = s.get("k").unwrap();
        assert_eq!(rec.siblings, vec![b"a".to_vec(), b"b".to_vec()]);

        // A reader that saw both siblings collapses them.
        s.put("k", b"ab".to_vec(), Some(rec.version)).unwrap();
        assert_eq!(s.get("k").unwrap().siblings, vec![b"ab".to_vec()]);
    }

    #[test]
    fn stale_put_adds_one_sibling() {
        let mut s = Store::new();
        let v0 = s.put("k", b"x".to_vec(), None).unwrap();
        s.put("k", b"y".to_vec(), Some(v0)).unwrap();
        assert_eq!(s.get("k").unwrap().siblings.len(), 1);
        s.put("k", b"z".to_vec(), Some(v0)).unwrap();
        assert_eq!(s.get("k").unwrap().siblings.len(), 2);
    }

    #[test]
    fn mode_is_fixed_by_first_write() {
        let mut s = Store::new();
        s.put_conditional("strong", b"1".to_vec(), None).unwrap();
        assert!(matches!(
            s.put("strong", b"2".to_vec(), None),
            Err(StoreError::WrongMode { .. })
        ));
        s.put("weak", b"1".to_vec(), None).unwrap();
        assert!(matches!(
            s.put_conditional("weak", b"2".to_vec(), None),
            Err(StoreError::WrongMode { .. })
        ));
    }

    #[test]
    fn conditional_write_races() {
        let mut s = Store::new();
        let v1 = s.put_conditional("k", b"a".to_vec(), None).unwrap();
        assert!(matches!(
            s.put_conditional("k", b"dup".to_vec(), None),
            Err(StoreError::Conflict { expected: None, .. })
        ));
        // Two racers read v1; only the first write lands.
        let first = s.put_conditional("k", b"b".to_vec(), Some(v1));
        let second = s.put_conditional("k", b"c".to_vec(), Some(v1));
        let v2 = first.unwrap();
        assert_eq!(
            second,
            Err(StoreError::Conflict {
                key: "k".into(),
                expected: Some(v1),
                current: Some(v2)
            })
        );
        // The loser re-reads and retries.
        let token = s.get("k").unwrap().version;
        s.put_conditional("k", b"c".to_vec(), Some(token)).unwrap();
        assert_eq!(s.get("k").unwrap().value(), b"c");
        assert_eq!(s.stats().conflicts, 2);
    }

    #[test]
    fn writes_to_one_key_are_serviced_in_order() {
        let mut s = Store::new();
        let timing = StoreTiming {
            read_ms: 1.0,
            write_ms: 8.0,
            write_service_ms: 2.0,
            jitter_ms: 0.0,
        };
        let t0 = SimTime::from_ms(10.0);
        assert_eq!(s.reserve_write("k", t0, &timing, Span::ZERO), SimTime::from_ms(18.0));
        assert_eq!(s.reserve_write("k", t0, &timing, Span::ZERO), SimTime::from_ms(20.0));
        assert_eq!(s.reserve_write("other", t0, &timing, Span::ZERO), SimTime::from_ms(18.0));
        let later = SimTime::from_ms(100.0);
        assert_eq!(s.reserve_write("k", later, &timing, Span::ZERO), SimTime::from_ms(108.0));
    }
}
