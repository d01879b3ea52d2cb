//! Per-bucket metrics, the run report, and CSV output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::api::{FailReason, OpKind, OpStatus};
use crate::time::{SimTime, Span};

/// First line of every metrics CSV. Bump the version when columns change.
pub const CSV_VERSION_LINE: &str = "# bcounter-metrics v1";

/// One time bucket. Operations count in the bucket where they started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub bucket_start_ms: u64,
    pub strategy: String,
    pub attempted: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub store_writes: u64,
    /// Writes carrying at least one client operation.
    pub op_writes: u64,
    pub conflicts: u64,
    pub transfer_msgs: u64,
    /// Units by which committed operations overshot the bound.
    pub violations: u64,
}

/// One finished client operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub client: u32,
    pub dc: u32,
    pub key: String,
    pub kind: OpKind,
    pub delta: i64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub status: OpStatus,
    pub reason: Option<FailReason>,
    /// The operation asked another data center for rights synchronously.
    pub sync_transfer: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategy: String,
    pub seed: u64,
    pub clients: u32,
    pub duration_ms: f64,
    pub attempted: u64,
    pub succeeded: u64,
    pub failed: u64,
    /// Failures the client was told to retry.
    pub retries: u64,
    /// Successful operations per simulated second of load.
    pub throughput: f64,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub p50_ms_by_dc: Vec<Option<f64>>,
    pub p99_ms_by_dc: Vec<Option<f64>>,
    pub store_writes: u64,
    pub conditional_writes: u64,
    pub op_writes: u64,
    pub conflicts: u64,
    /// Lost conditional writes over all conditional writes.
    pub conflict_fraction: f64,
    pub op_writes_per_success: f64,
    pub conditional_writes_per_success: f64,
    pub transfer_msgs: u64,
    /// Operations that sent at least one synchronous rights request.
    pub sync_transfer_ops: u64,
    /// Rights requests sent to a replica holding no rights in the sender's
    /// view.
    pub requests_to_exhausted: u64,
    pub violations: u64,
    /// First instant every counter sat at its bound.
    pub depleted_at_ms: Option<f64>,
    /// First instant, after depletion, at which every data center saw no
    /// rights anywhere.
    pub depletion_known_at_ms: Option<f64>,
    /// Operations started before `depletion_known_at_ms` (all of them if
    /// never).
    pub ops_before_depletion: u64,
    /// All data centers hold equal state at the end of the run.
    pub converged: bool,
    /// Last write after the load stopped that carried operations or
    /// transfers (the load end if none did).
    pub quiescent_at_ms: f64,
    /// From quiescence until the stores last became equal.
    pub convergence_ms: Option<f64>,
    /// Sum of the counters as stored in data center 0 at the end.
    pub final_value: i64,
    /// Sum of the initial values plus every committed operation.
    pub expected_value: i64,
    pub fail_reasons: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub op_log: Vec<OpRecord>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    attempted: u64,
    succeeded: u64,
    failed: u64,
    latencies: Vec<u64>,
    store_writes: u64,
    op_writes: u64,
    conflicts: u64,
    transfer_msgs: u64,
    violations: u64,
}

/// Nearest-rank percentile of sorted microsecond samples, in milliseconds.
pub fn percentile(sorted: &[u64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1] as f64 / 1000.0)
}

#[derive(Debug, Clone)]
pub(crate) struct Metrics {
    bucket: Span,
    buckets: Vec<Bucket>,
    by_dc: Vec<Vec<u64>>,
    pub(crate) conditional_writes: u64,
    pub(crate) sync_transfer_ops: u64,
    pub(crate) requests_to_exhausted: u64,
    pub(crate) retries: u64,
    pub(crate) fail_reasons: BTreeMap<String, u64>,
}

impl Metrics {
    pub(crate) fn new(bucket_ms: f64, dcs: usize) -> Self {
        Metrics {
            bucket: Span::from_ms(bucket_ms).max(Span(1)),
            buckets: Vec::new(),
            by_dc: vec![Vec::new(); dcs],
            conditional_writes: 0,
            sync_transfer_ops: 0,
            requests_to_exhausted: 0,
            retries: 0,
            fail_reasons: BTreeMap::new(),
        }
    }

    fn at(&mut self, t: SimTime) -> &mut Bucket {
        let i = (t.0 / self.bucket.0) as usize;
        if self.buckets.len() <= i {
            self.buckets.resize_with(i + 1, Bucket::default);
        }
        &mut self.buckets[i]
    }

    /// Makes sure buckets exist up to `t`, so quiet tails still get rows.
    pub(crate) fn extend_to(&mut self, t: SimTime) {
        self.at(t);
    }

    pub(crate) fn op_started(&mut self, t: SimTime) {
        self.at(t).attempted += 1;
    }

    pub(crate) fn op_finished(
        &mut self,
        started: SimTime,
        now: SimTime,
        dc: usize,
        status: OpStatus,
        reason: Option<FailReason>,
        sync: bool,
    ) {
        let latency = now.since(started).0;
        let b = self.at(started);
        b.latencies.push(latency);
        if status == OpStatus::Ok {
            b.succeeded += 1;
        } else {
            b.failed += 1;
        }
        self.by_dc[dc].push(latency);
        if status == OpStatus::Retry {
            self.retries += 1;
        }
        if let Some(r) = reason {
            *self.fail_reasons.entry(format!("{r:?}")).or_default() += 1;
        }
        if sync {
            self.sync_transfer_ops += 1;
        }
    }

    pub(crate) fn store_write(&mut self, t: SimTime, conditional: bool, conflict: bool, with_ops: bool) {
        let b = self.at(t);
        b.store_writes += 1;
        b.conflicts += conflict as u64;
        b.op_writes += with_ops as u64;
        self.conditional_writes += conditional as u64;
    }

    pub(crate) fn transfer_msg(&mut self, t: SimTime) {
        self.at(t).transfer_msgs += 1;
    }

    pub(crate) fn violation(&mut self, t: SimTime, amount: u64) {
        self.at(t).violations += amount;
    }

    pub(crate) fn rows(&self, strategy: &str) -> Vec<MetricsRow> {
        self.buckets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut lat = b.latencies.clone();
                lat.sort_unstable();
                MetricsRow {
                    bucket_start_ms: (i as u64 * self.bucket.0) / 1000,
                    strategy: strategy.to_owned(),
                    attempted: b.attempted,
                    succeeded: b.succeeded,
                    failed: b.failed,
                    p50_ms: percentile(&lat, 50.0),
                    p99_ms: percentile(&lat, 99.0),
                    store_writes: b.store_writes,
                    op_writes: b.op_writes,
                    conflicts: b.conflicts,
                    transfer_msgs: b.transfer_msgs,
                    violations: b.violations,
                }
            })
            .collect()
    }

    /// Fills the totals of `report`.
    pub(crate) fn summarize(&self, report: &mut Report) {
        let mut all = Vec::new();
        for b in &self.buckets {
            report.attempted += b.attempted;
            report.succeeded += b.succeeded;
            report.failed += b.failed;
            report.store_writes += b.store_writes;
            report.op_writes += b.op_writes;
            report.conflicts += b.conflicts;
            report.transfer_msgs += b.transfer_msgs;
            report.violations += b.violations;
            all.extend_from_slice(&b.latencies);
        }
        all.sort_unstable();
        report.p50_ms = percentile(&all, 50.0);
        report.p99_ms = percentile(&all, 99.0);
        for lat in &self.by_dc {
            let mut lat = lat.clone();
            lat.sort_unstable();
            report.p50_ms_by_dc.push(percentile(&lat, 50.0));
            report.p99_ms_by_dc.push(percentile(&lat, 99.0));
        }
        report.conditional_writes = self.conditional_writes;
        report.retries = self.retries;
        report.sync_transfer_ops = self.sync_transfer_ops;
        report.requests_to_exhausted = self.requests_to_exhausted;
        report.fail_reasons = self.fail_reasons.clone();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        report.conflict_fraction = ratio(report.conflicts, report.conditional_writes);
        report.op_writes_per_success = ratio(report.op_writes, report.succeeded);
        report.conditional_writes_per_success = ratio(report.conditional_writes, report.succeeded);
    }
}

/// Renders rows as CSV, preceded by [`CSV_VERSION_LINE`].
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("rows serialize");
    }
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).expect("header");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8");
    format!("{CSV_VERSION_LINE}\n{body}")
}

pub const CSV_COLUMNS: [&str; 12] = [
    "bucket_start_ms",
    "strategy",
    "attempted",
    "succeeded",
    "failed",
    "p50_ms",
    "p99_ms",
    "store_writes",
    "op_writes",
    "conflicts",
    "transfer_msgs",
    "violations",
];

/// Parses CSV produced by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<MetricsRow>, csv::Error> {
    let body = text.strip_prefix(CSV_VERSION_LINE).unwrap_or(text).trim_start_matches('\n');
    csv::Reader::from_reader(body.as_bytes()).deserialize().collect()
}
