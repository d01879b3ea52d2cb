//! Client-side middleware.
//!
//! Counters live in the local data center's store as strongly consistent
//! opaque objects. An update reads the counter, applies the operation to the
//! decoded state at this data center's replica, and writes it back with a
//! conditional write; a lost race re-runs the whole sequence on the fresh
//! state. The store never replicates strong keys, so a [`SyncAgent`] ships
//! modified counters to the other data centers, where a [`MergeDriver`] joins
//! them into the local copy.
//!
//! The drivers here perform no I/O. They return the next [`StoreCall`] (or
//! rights acquisition) to perform and are fed the outcome, so the same code
//! runs under the simulator and under [`ClientLibrary`], which executes calls
//! directly against a [`Store`].

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::api::{CounterOp, FailReason, OpFlag, OpResult};
use crate::crdt::{BoundedCounter, CounterError, Polarity, ReplicaId};
use crate::store::{Consistency, Store, StoreCall, StoreError, StoreReply, Version, VersionedRecord};
use crate::transfer::{self, AcquireStep, SyncAcquisition, TransferRequest, TransferResponse, TransferStatus};

pub const DEFAULT_RETRY_LIMIT: u32 = 16;

/// Decodes every sibling of `record` and joins them.
pub fn decode_record(record: &VersionedRecord) -> Result<BoundedCounter, CounterError> {
    let mut siblings = record.siblings.iter();
    let first = siblings
        .next()
        .ok_or(CounterError::MalformedEncoding("record without value"))?;
    let mut state = BoundedCounter::decode(first)?;
    for bytes in siblings {
        state.merge(&BoundedCounter::decode(bytes)?)?;
    }
    Ok(state)
}

/// Write call that replaces `record` with `state`.
fn write_back(record: &VersionedRecord, state: &BoundedCounter) -> StoreCall {
    match record.consistency {
        Consistency::Strong => StoreCall::PutConditional {
            key: record.key.clone(),
            value: state.encode(),
            expected: Some(record.version),
        },
        Consistency::Weak => StoreCall::Put {
            key: record.key.clone(),
            value: state.encode(),
            context: Some(record.version),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientStep {
    Store(StoreCall),
    /// Obtain rights from other replicas (see [`SyncAcquisition`]) and report
    /// the outcome through [`UpdateDriver::on_acquired`].
    Acquire { view: BoundedCounter, needed: i64 },
    Done(OpResult),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Reading,
    Writing,
    Acquiring,
    Done,
}

/// One increment or decrement executed by the client library.
#[derive(Debug, Clone)]
pub struct UpdateDriver {
    key: String,
    replica: ReplicaId,
    op: CounterOp,
    flag: OpFlag,
    retry_limit: u32,
    conflicts: u32,
    acquired: bool,
    granted: Option<BoundedCounter>,
    phase: Phase,
}

impl UpdateDriver {
    pub fn new(key: &str, replica: ReplicaId, op: CounterOp, flag: OpFlag, retry_limit: u32) -> Self {
        UpdateDriver {
            key: key.to_owned(),
            replica,
            op,
            flag,
            retry_limit,
            conflicts: 0,
            acquired: false,
            granted: None,
            phase: Phase::Idle,
        }
    }

    pub fn op(&self) -> CounterOp {
        self.op
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Conditional writes this operation lost so far.
    pub fn conflicts(&self) -> u32 {
        self.conflicts
    }

    /// Whether the operation needed a synchronous rights acquisition.
    pub fn acquired(&self) -> bool {
        self.acquired
    }

    pub fn start(&mut self) -> ClientStep {
        self.read()
    }

    fn read(&mut self) -> ClientStep {
        self.phase = Phase::Reading;
        ClientStep::Store(StoreCall::Get {
            key: self.key.clone(),
        })
    }

    fn finish(&mut self, result: OpResult) -> ClientStep {
        self.phase = Phase::Done;
        ClientStep::Done(result)
    }

    pub fn on_get(&mut self, reply: Result<VersionedRecord, StoreError>) -> ClientStep {
        debug_assert_eq!(self.phase, Phase::Reading);
        let record = match reply {
            Ok(record) => record,
            Err(_) => return self.finish(OpResult::fail(FailReason::NotFound)),
        };
        let mut state = match decode_record(&record) {
            Ok(state) => state,
            Err(_) => return self.finish(OpResult::fail(FailReason::Malformed)),
        };
        if let Some(granted) = &self.granted {
            if state.merge(granted).is_err() {
                return self.finish(OpResult::fail(FailReason::Malformed));
            }
        }
        match self.op.apply(&mut state, self.replica) {
            Ok(()) => {
                self.phase = Phase::Writing;
                ClientStep::Store(write_back(&record, &state))
            }
            Err(CounterError::NotEnoughRights { .. }) => match self.flag {
                OpFlag::Local => {
                    let result = OpResult::lacking_rights(&state, self.replica, self.op);
                    self.finish(result)
                }
                OpFlag::Global if !self.acquired => {
                    self.acquired = true;
                    self.phase = Phase::Acquiring;
                    ClientStep::Acquire {
                        view: state,
                        needed: self.op.delta,
                    }
                }
                OpFlag::Global => self.finish(OpResult::fail(FailReason::NotEnoughRights)),
            },
            Err(_) => self.finish(OpResult::fail(FailReason::Malformed)),
        }
    }

    pub fn on_put(&mut self, reply: Result<Version, StoreError>) -> ClientStep {
        debug_assert_eq!(self.phase, Phase::Writing);
        match reply {
            Ok(_) => self.finish(OpResult::ok()),
            Err(StoreError::Conflict { .. }) => {
                self.conflicts += 1;
                if self.conflicts >= self.retry_limit {
                    self.finish(OpResult::fail(FailReason::RetriesExhausted))
                } else {
                    self.read()
                }
            }
            Err(_) => self.finish(OpResult::fail(FailReason::Malformed)),
        }
    }

    /// Outcome of the acquisition requested by [`ClientStep::Acquire`].
    pub fn on_acquired(&mut self, granted: Option<BoundedCounter>) -> ClientStep {
        debug_assert_eq!(self.phase, Phase::Acquiring);
        match granted {
            Some(state) => {
                self.granted = Some(state);
                self.read()
            }
            None => self.finish(OpResult::fail(FailReason::NotEnoughRights)),
        }
    }

    pub fn on_reply(&mut self, reply: StoreReply) -> ClientStep {
        match reply {
            StoreReply::Get(r) => self.on_get(r),
            StoreReply::Put(r) => self.on_put(r),
        }
    }
}

/// Read-merge-write of a counter state received from another data center.
#[derive(Debug, Clone)]
pub struct MergeDriver {
    key: String,
    incoming: BoundedCounter,
    retry_limit: u32,
    conflicts: u32,
}

/// Next move of a [`MergeDriver`] or [`GrantDriver`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RmwStep<T> {
    Store(StoreCall),
    Done(T),
}

impl MergeDriver {
    pub fn new(key: &str, incoming: BoundedCounter, retry_limit: u32) -> Self {
        MergeDriver {
            key: key.to_owned(),
            incoming,
            retry_limit,
            conflicts: 0,
        }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Joins another received state into the pending one.
    pub fn absorb(&mut self, more: &BoundedCounter) -> Result<(), CounterError> {
        self.incoming.merge(more)
    }

    pub fn start(&mut self) -> RmwStep<bool> {
        RmwStep::Store(StoreCall::Get {
            key: self.key.clone(),
        })
    }

    /// `Done(true)` when the store changed.
    pub fn on_reply(&mut self, reply: StoreReply) -> RmwStep<bool> {
        match reply {
            StoreReply::Get(Err(StoreError::NotFound(_))) => {
                RmwStep::Store(StoreCall::PutConditional {
                    key: self.key.clone(),
                    value: self.incoming.encode(),
                    expected: None,
                })
            }
            StoreReply::Get(Err(_)) => RmwStep::Done(false),
            StoreReply::Get(Ok(record)) => {
                let Ok(mut local) = decode_record(&record) else {
                    return RmwStep::Done(false);
                };
                if self.incoming.leq(&local).unwrap_or(true) && record.siblings.len() == 1 {
                    return RmwStep::Done(false);
                }
                if local.merge(&self.incoming).is_err() {
                    return RmwStep::Done(false);
                }
                RmwStep::Store(write_back(&record, &local))
            }
            StoreReply::Put(Ok(_)) => RmwStep::Done(true),
            StoreReply::Put(Err(StoreError::Conflict { .. })) => {
                self.conflicts += 1;
                if self.conflicts >= self.retry_limit {
                    RmwStep::Done(false)
                } else {
                    self.start()
                }
            }
            StoreReply::Put(Err(_)) => RmwStep::Done(false),
        }
    }
}

/// Serves a transfer request at the grantor's data center: read, transfer,
/// conditional write, and only then answer.
#[derive(Debug, Clone)]
pub struct GrantDriver {
    request: TransferRequest,
    retry_limit: u32,
    conflicts: u32,
    pending: Option<TransferResponse>,
}

impl GrantDriver {
    pub fn new(request: TransferRequest, retry_limit: u32) -> Self {
        GrantDriver {
            request,
            retry_limit,
            conflicts: 0,
            pending: None,
        }
    }

    pub fn request(&self) -> &TransferRequest {
        &self.request
    }

    pub fn start(&mut self) -> RmwStep<TransferResponse> {
        RmwStep::Store(StoreCall::Get {
            key: self.request.key.clone(),
        })
    }

    fn denied(&self) -> TransferResponse {
        TransferResponse::empty(&self.request, TransferStatus::Denied)
    }

    pub fn on_reply(&mut self, reply: StoreReply) -> RmwStep<TransferResponse> {
        match reply {
            StoreReply::Get(Ok(record)) => {
                let Ok(mut state) = decode_record(&record) else {
                    return RmwStep::Done(self.denied());
                };
                let response = transfer::handle_request(&mut state, &self.request);
                if response.status != TransferStatus::Granted {
                    return RmwStep::Done(response);
                }
                self.pending = Some(response);
                RmwStep::Store(write_back(&record, &state))
            }
            StoreReply::Get(Err(_)) => RmwStep::Done(self.denied()),
            StoreReply::Put(Ok(_)) => {
                RmwStep::Done(self.pending.take().unwrap_or_else(|| self.denied()))
            }
            StoreReply::Put(Err(StoreError::Conflict { .. })) => {
                self.pending = None;
                self.conflicts += 1;
                if self.conflicts >= self.retry_limit {
                    RmwStep::Done(self.denied())
                } else {
                    self.start()
                }
            }
            StoreReply::Put(Err(_)) => RmwStep::Done(self.denied()),
        }
    }
}

/// A counter state shipped between data centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncMessage {
    pub key: String,
    pub state: Vec<u8>,
    pub from: ReplicaId,
}

/// Tracks, for every other data center, the counters modified since they
/// were last shipped there.
///
/// A destination that cannot be reached keeps its backlog until it can, so a
/// partition delays propagation without losing it.
#[derive(Debug, Clone)]
pub struct SyncAgent {
    me: ReplicaId,
    dirty: BTreeMap<ReplicaId, BTreeSet<String>>,
}

impl SyncAgent {
    pub fn new(me: ReplicaId, replicas: usize) -> Self {
        let dirty = (0..replicas as u32)
            .map(ReplicaId)
            .filter(|&r| r != me)
            .map(|r| (r, BTreeSet::new()))
            .collect();
        SyncAgent { me, dirty }
    }

    pub fn me(&self) -> ReplicaId {
        self.me
    }

    pub fn note_write(&mut self, key: &str) {
        for keys in self.dirty.values_mut() {
            if !keys.contains(key) {
                keys.insert(key.to_owned());
            }
        }
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty.values().any(|k| !k.is_empty())
    }

    /// Takes the backlog of every reachable destination, as (destination,
    /// key) pairs.
    pub fn drain(&mut self, reachable: impl Fn(ReplicaId) -> bool) -> Vec<(ReplicaId, String)> {
        let mut out = Vec::new();
        for (&dest, keys) in self.dirty.iter_mut() {
            if reachable(dest) {
                out.extend(std::mem::take(keys).into_iter().map(|k| (dest, k)));
            }
        }
        out
    }

    /// One message per counter and reachable destination, carrying the
    /// counter's full state as currently stored.
    pub fn tick(
        &mut self,
        store: &Store,
        reachable: impl Fn(ReplicaId) -> bool,
    ) -> Vec<(ReplicaId, SyncMessage)> {
        let from = self.me;
        self.drain(reachable)
            .into_iter()
            .filter_map(|(dest, key)| {
                let record = store.peek(&key).ok()?;
                let state = decode_record(record).ok()?;
                Some((
                    dest,
                    SyncMessage {
                        key,
                        state: state.encode(),
                        from,
                    },
                ))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("counter {0:?} already exists")]
    AlreadyExists(String),
    #[error("counter {0:?} not found")]
    NotFound(String),
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Synchronous facade over the drivers for one data center, executing every
/// call immediately against a store.
#[derive(Debug, Clone)]
pub struct ClientLibrary {
    dc: ReplicaId,
    replicas: usize,
    retry_limit: u32,
}

impl ClientLibrary {
    pub fn new(dc: ReplicaId, replicas: usize) -> Self {
        ClientLibrary {
            dc,
            replicas,
            retry_limit: DEFAULT_RETRY_LIMIT,
        }
    }

    pub fn with_retry_limit(mut self, limit: u32) -> Self {
        self.retry_limit = limit;
        self
    }

    /// Installs a counter whose value equals `bound`.
    pub fn create(
        &self,
        store: &mut Store,
        key: &str,
        polarity: Polarity,
        bound: i64,
    ) -> Result<(), ClientError> {
        let counter = BoundedCounter::new(polarity, bound, self.replicas, self.dc, bound)?;
        match store.put_conditional(key, counter.encode(), None) {
            Ok(_) => Ok(()),
            Err(StoreError::Conflict { .. }) | Err(StoreError::WrongMode { .. }) => {
                Err(ClientError::AlreadyExists(key.to_owned()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Value of the locally stored state. Concurrent siblings are merged and
    /// the merge is written back.
    pub fn read(&self, store: &mut Store, key: &str) -> Result<i64, ClientError> {
        let record = store.get(key).map_err(|_| ClientError::NotFound(key.to_owned()))?;
        let state = decode_record(&record)?;
        if record.siblings.len() > 1 {
            // Losing this race is harmless: the winner already wrote a newer state.
            let _ = store.execute(&write_back(&record, &state));
        }
        Ok(state.value())
    }

    /// Reads the decoded, sibling-merged state.
    pub fn state(&self, store: &mut Store, key: &str) -> Result<BoundedCounter, ClientError> {
        let record = store.get(key).map_err(|_| ClientError::NotFound(key.to_owned()))?;
        Ok(decode_record(&record)?)
    }

    /// Runs an operation to completion. `acquire` performs a synchronous
    /// rights acquisition for global operations; pass [`no_remote`] when there
    /// are no reachable replicas.
    pub fn update(
        &self,
        store: &mut Store,
        key: &str,
        op: CounterOp,
        flag: OpFlag,
        acquire: &mut dyn FnMut(BoundedCounter, i64) -> Option<BoundedCounter>,
    ) -> OpResult {
        let mut driver = UpdateDriver::new(key, self.dc, op, flag, self.retry_limit);
        let mut step = driver.start();
        loop {
            step = match step {
                ClientStep::Store(call) => driver.on_reply(store.execute(&call)),
                ClientStep::Acquire { view, needed } => driver.on_acquired(acquire(view, needed)),
                ClientStep::Done(result) => return result,
            };
        }
    }

    pub fn inc(&self, store: &mut Store, key: &str, delta: i64, flag: OpFlag) -> OpResult {
        self.update(store, key, CounterOp::inc(delta), flag, &mut no_remote)
    }

    pub fn dec(&self, store: &mut Store, key: &str, delta: i64, flag: OpFlag) -> OpResult {
        self.update(store, key, CounterOp::dec(delta), flag, &mut no_remote)
    }

    /// Merges a state received from another data center into the store.
    pub fn merge_remote(&self, store: &mut Store, msg: &SyncMessage) -> Result<bool, ClientError> {
        let incoming = BoundedCounter::decode(&msg.state)?;
        let mut driver = MergeDriver::new(&msg.key, incoming, self.retry_limit);
        let mut step = driver.start();
        loop {
            step = match step {
                RmwStep::Store(call) => driver.on_reply(store.execute(&call)),
                RmwStep::Done(changed) => return Ok(changed),
            };
        }
    }

    /// Serves a transfer request from another data center.
    pub fn grant(&self, store: &mut Store, req: TransferRequest) -> TransferResponse {
        let mut driver = GrantDriver::new(req, self.retry_limit);
        let mut step = driver.start();
        loop {
            step = match step {
                RmwStep::Store(call) => driver.on_reply(store.execute(&call)),
                RmwStep::Done(resp) => return resp,
            };
        }
    }
}

/// Acquisition callback for [`ClientLibrary::update`] that never finds rights.
pub fn no_remote(_view: BoundedCounter, _needed: i64) -> Option<BoundedCounter> {
    None
}

/// Runs a [`SyncAcquisition`] against in-process grantors. `serve` answers a
/// request on behalf of its grantor, or returns `None` for an unreachable one.
pub fn acquire_with(
    key: &str,
    view: BoundedCounter,
    requester: ReplicaId,
    needed: i64,
    serve: &mut dyn FnMut(TransferRequest) -> Option<TransferResponse>,
) -> Option<BoundedCounter> {
    let mut acq = SyncAcquisition::new(key, view, requester, needed);
    let mut step = acq.start();
    loop {
        match step {
            AcquireStep::Done(result) => return result,
            AcquireStep::Send(req) => {
                let grantor = req.grantor;
                step = match serve(req) {
                    Some(resp) => acq.on_response(&resp),
                    None => acq.on_timeout(grantor),
                }
                .expect("response matches the outstanding request");
            }
        }
    }
}
