//! The unbounded baseline: a PN counter with one increment and one decrement
//! tally per data center, merged by entry-wise maximum.

use crate::store::VersionedRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnCounter {
    base: i64,
    incs: Vec<i64>,
    decs: Vec<i64>,
}

impl PnCounter {
    pub fn new(base: i64, replicas: usize) -> Self {
        PnCounter {
            base,
            incs: vec![0; replicas],
            decs: vec![0; replicas],
        }
    }

    pub fn value(&self) -> i64 {
        self.base + self.incs.iter().sum::<i64>() - self.decs.iter().sum::<i64>()
    }

    /// Adds `effect` (positive or negative) to the tallies of `dc`.
    pub fn apply(&mut self, dc: usize, effect: i64) {
        if effect >= 0 {
            self.incs[dc] += effect;
        } else {
            self.decs[dc] -= effect;
        }
    }

    pub fn merge(&mut self, other: &PnCounter) {
        for (a, b) in self.incs.iter_mut().zip(&other.incs) {
            *a = (*a).max(*b);
        }
        for (a, b) in self.decs.iter_mut().zip(&other.decs) {
            *a = (*a).max(*b);
        }
    }

    /// Whether `dc`'s own tallies differ between the two states.
    pub fn row_differs(&self, other: &PnCounter, dc: usize) -> bool {
        self.incs[dc] != other.incs[dc] || self.decs[dc] != other.decs[dc]
    }

    /// `base`, replica count, then the increment and decrement tallies, all
    /// little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 16 * self.incs.len());
        out.extend_from_slice(&self.base.to_le_bytes());
        out.extend_from_slice(&(self.incs.len() as u32).to_le_bytes());
        for v in self.incs.iter().chain(&self.decs) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let base = i64::from_le_bytes(bytes.get(0..8)?.try_into().ok()?);
        let n = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
        if bytes.len() != 12 + 16 * n {
            return None;
        }
        let mut words = bytes[12..]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let incs = words.by_ref().take(n).collect();
        let decs = words.collect();
        Some(PnCounter { base, incs, decs })
    }

    /// Joins every sibling of a stored record.
    pub fn from_record(record: &VersionedRecord) -> Option<Self> {
        let mut siblings = record.siblings.iter();
        let mut state = PnCounter::decode(siblings.next()?)?;
        for s in siblings {
            state.merge(&PnCounter::decode(s)?);
        }
        Some(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Store;

    #[test]
    fn tallies_and_value() {
        let mut c = PnCounter::new(10, 3);
        c.apply(0, 5);
        c.apply(1, -3);
        c.apply(1, -1);
        assert_eq!(c.value(), 11);
        assert_eq!(PnCounter::decode(&c.encode()), Some(c));
    }

    #[test]
    fn merge_keeps_both_sides() {
        let mut a = PnCounter::new(0, 2);
        let mut b = a.clone();
        a.apply(0, -2);
        b.apply(1, -3);
        let mut m = a.clone();
        m.merge(&b);
        assert_eq!(m.value(), -5);
        m.merge(&a);
        assert_eq!(m.value(), -5);
    }

    #[test]
    fn concurrent_puts_become_siblings_and_join() {
        let mut store = Store::new();
        let base = PnCounter::new(6, 2);
        let v = store.put("k", base.encode(), None).unwrap();
        let (mut a, mut b) = (base.clone(), base.clone());
        a.apply(0, -1);
        b.apply(1, -1);
        store.put("k", a.encode(), Some(v)).unwrap();
        store.put("k", b.encode(), None).unwrap();
        let rec = store.get("k").unwrap();
        assert_eq!(rec.siblings.len(), 2);
        assert_eq!(PnCounter::from_record(&rec).unwrap().value(), 4);
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        let c = PnCounter::new(1, 2);
        let bytes = c.encode();
        assert!(PnCounter::decode(&bytes[..bytes.len() - 1]).is_none());
        assert!(PnCounter::decode(&[]).is_none());
    }
}
