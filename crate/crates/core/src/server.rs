//! Server-side middleware.
//!
//! Inside one data center every counter has a single owner node, chosen by
//! rendezvous hashing over the live nodes ([`OwnerTable`]). The owner keeps
//! the counter cached, applies operations to the cached copy and writes it
//! back with a conditional write. While a write is in flight, further
//! operations are applied to the cache and ride on the next write together
//! (batching). Clients whose operations are in a write hear back only once
//! that write commits; if it loses a race (possible only when ownership moved)
//! they are told to retry and the cache is reloaded from the store.
//!
//! [`OwnerNode`] is a sans-IO state machine: inputs are method calls, outputs
//! are [`NodeAction`]s for the environment to carry out.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::api::{CounterOp, FailReason, OpFlag, OpResult};
use crate::client::{decode_record, SyncAgent, SyncMessage};
use crate::crdt::{BoundedCounter, CounterError, ReplicaId};
use crate::store::{StoreCall, StoreError, StoreReply, Version};
use crate::transfer::{
    self, AcquireStep, SyncAcquisition, TransferMode, TransferRequest, TransferResponse,
    TransferStatus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// Key ownership within one data center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerTable {
    alive: BTreeSet<u32>,
    epoch: u64,
}

fn score(key: &str, node: u32) -> u64 {
    let mut h = FnvHasher::default();
    h.write(key.as_bytes());
    h.write_u32(node);
    // FNV's high bits mix poorly on short inputs; finish with splitmix64.
    let mut z = h.finish().wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl OwnerTable {
    pub fn new(nodes: usize) -> Self {
        OwnerTable {
            alive: (0..nodes as u32).collect(),
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.alive.iter().map(|&n| NodeId(n))
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive.contains(&node.0)
    }

    /// Owner of `key` at the current epoch; `None` when no node is alive.
    pub fn route(&self, key: &str) -> Option<NodeId> {
        self.alive
            .iter()
            .max_by_key(|&&n| (score(key, n), std::cmp::Reverse(n)))
            .map(|&n| NodeId(n))
    }

    pub fn join(&mut self, node: NodeId) {
        if self.alive.insert(node.0) {
            self.epoch += 1;
        }
    }

    pub fn leave(&mut self, node: NodeId) {
        if self.alive.remove(&node.0) {
            self.epoch += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub replicas: usize,
    /// Apply operations to the cache while a write is in flight.
    pub batching: bool,
    /// Most operations per write; 0 for no limit.
    pub max_batch: usize,
    /// Rebalancing kicks in below this many local rights.
    pub rebalance_threshold: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRequest {
    pub session: SessionId,
    pub key: String,
    pub op: CounterOp,
    pub flag: OpFlag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeAction {
    /// Issue a store call for `key`; feed the reply to
    /// [`OwnerNode::on_store_reply`]. `ops` lists the client operations a
    /// write carries.
    Store {
        key: String,
        call: StoreCall,
        ops: Vec<CounterOp>,
    },
    /// `acquired` tells whether the operation went through a synchronous
    /// rights acquisition.
    Reply {
        session: SessionId,
        result: OpResult,
        acquired: bool,
    },
    /// `visible` is the grantor's rights in this node's view when sending.
    /// Synchronous requests expect [`OwnerNode::on_transfer_response`] or
    /// [`OwnerNode::on_transfer_timeout`].
    SendTransfer { req: TransferRequest, visible: i64 },
    RespondTransfer(TransferResponse),
    Propagate { to: ReplicaId, msg: SyncMessage },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Io {
    Idle,
    Reading,
    Writing,
}

#[derive(Debug, Clone)]
struct Waiter {
    session: SessionId,
    op: CounterOp,
    acquired: bool,
}

#[derive(Debug, Clone)]
enum Pending {
    Op(OpRequest, bool),
    Transfer(TransferRequest),
}

#[derive(Debug, Clone)]
struct InFlight {
    waiters: Vec<Waiter>,
    grants: Vec<TransferResponse>,
    state: BoundedCounter,
}

#[derive(Debug, Clone)]
struct Acquisition {
    acq: SyncAcquisition,
    request: OpRequest,
    blocked: VecDeque<OpRequest>,
}

#[derive(Debug, Clone)]
struct Entry {
    io: Io,
    /// Version of the last state read or written; `None` while the key is
    /// absent from the store.
    version: Option<Version>,
    /// Last durable state.
    stored: Option<BoundedCounter>,
    /// Durable state plus unwritten changes. `None` until loaded.
    working: Option<BoundedCounter>,
    batch: Vec<Waiter>,
    grants: Vec<TransferResponse>,
    /// Changes other than client operations await a write.
    unwritten: bool,
    in_flight: Option<InFlight>,
    queue: VecDeque<Pending>,
    /// Join of every state received from other data centers.
    remote: Option<BoundedCounter>,
    acquisition: Option<Acquisition>,
    retiring: bool,
}

impl Entry {
    fn new() -> Self {
        Entry {
            io: Io::Idle,
            version: None,
            stored: None,
            working: None,
            batch: Vec::new(),
            grants: Vec::new(),
            unwritten: false,
            in_flight: None,
            queue: VecDeque::new(),
            remote: None,
            acquisition: None,
            retiring: false,
        }
    }
}

fn reply(session: SessionId, result: OpResult, acquired: bool) -> NodeAction {
    NodeAction::Reply {
        session,
        result,
        acquired,
    }
}

/// One owner node of one data center.
#[derive(Debug, Clone)]
pub struct OwnerNode {
    dc: ReplicaId,
    config: ServerConfig,
    entries: BTreeMap<String, Entry>,
    sync: SyncAgent,
}

impl OwnerNode {
    pub fn new(dc: ReplicaId, config: ServerConfig) -> Self {
        OwnerNode {
            dc,
            sync: SyncAgent::new(dc, config.replicas),
            config,
            entries: BTreeMap::new(),
        }
    }

    pub fn dc(&self) -> ReplicaId {
        self.dc
    }

    /// Keys with cached state.
    pub fn cached(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Cached state of `key` including unwritten changes.
    pub fn working(&self, key: &str) -> Option<&BoundedCounter> {
        self.entries.get(key)?.working.as_ref()
    }

    /// True when no key has a store call, acquisition or queued work pending.
    pub fn is_quiet(&self) -> bool {
        self.entries.values().all(|e| {
            e.io == Io::Idle && e.acquisition.is_none() && e.queue.is_empty() && e.batch.is_empty()
        })
    }

    pub fn on_request(&mut self, req: OpRequest) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let key = req.key.clone();
        let entry = self.entries.entry(key.clone()).or_insert_with(Entry::new);
        entry.retiring = false;
        if entry.working.is_none() {
            entry.queue.push_back(Pending::Op(req, false));
        } else {
            self.process_op(&key, req, false, &mut acts);
        }
        self.settle(&key, &mut acts);
        acts
    }

    pub fn on_transfer_request(&mut self, req: TransferRequest) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let key = req.key.clone();
        let entry = self.entries.entry(key.clone()).or_insert_with(Entry::new);
        if entry.retiring {
            acts.push(NodeAction::RespondTransfer(TransferResponse::empty(
                &req,
                TransferStatus::Denied,
            )));
            return acts;
        }
        if entry.working.is_none() {
            entry.queue.push_back(Pending::Transfer(req));
        } else {
            self.serve_transfer(&key, req, &mut acts);
        }
        self.settle(&key, &mut acts);
        acts
    }

    /// A counter state from another data center.
    pub fn on_remote_state(&mut self, key: &str, state: &[u8]) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let Ok(state) = BoundedCounter::decode(state) else {
            return acts;
        };
        if !self.entries.contains_key(key) {
            self.entries.insert(key.to_owned(), Entry::new());
        }
        self.fold_remote(key, &state);
        self.settle(key, &mut acts);
        acts
    }

    pub fn on_transfer_response(&mut self, resp: &TransferResponse) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let key = resp.key.clone();
        if !self.entries.contains_key(&key) {
            return acts;
        }
        if let Some(state) = resp.state.as_deref().and_then(|b| BoundedCounter::decode(b).ok()) {
            self.fold_remote(&key, &state);
        }
        let entry = self.entries.get_mut(&key).expect("checked above");
        let step = entry.acquisition.as_mut().and_then(|a| a.acq.on_response(resp));
        if let Some(step) = step {
            self.acquisition_step(&key, step, &mut acts);
        }
        self.settle(&key, &mut acts);
        acts
    }

    pub fn on_transfer_timeout(&mut self, key: &str, grantor: ReplicaId) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let Some(entry) = self.entries.get_mut(key) else {
            return acts;
        };
        let step = entry.acquisition.as_mut().and_then(|a| a.acq.on_timeout(grantor));
        if let Some(step) = step {
            self.acquisition_step(key, step, &mut acts);
        }
        self.settle(key, &mut acts);
        acts
    }

    pub fn on_store_reply(&mut self, key: &str, outcome: StoreReply) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let Some(entry) = self.entries.get_mut(key) else {
            return acts;
        };
        match (entry.io, outcome) {
            (Io::Reading, StoreReply::Get(Ok(record))) => {
                entry.io = Io::Idle;
                match decode_record(&record) {
                    Ok(state) => {
                        entry.version = Some(record.version);
                        let mut working = state.clone();
                        if let Some(remote) = &entry.remote {
                            if working.merge(remote).is_ok() && working != state {
                                entry.unwritten = true;
                            }
                        }
                        entry.stored = Some(state);
                        entry.working = Some(working);
                        // A previous owner may have crashed before shipping
                        // what it wrote.
                        self.sync.note_write(key);
                    }
                    Err(_) => self.abandon(key, FailReason::Malformed, &mut acts),
                }
            }
            (Io::Reading, StoreReply::Get(Err(_))) => {
                entry.io = Io::Idle;
                entry.version = None;
                match entry.remote.clone() {
                    Some(remote) => {
                        entry.working = Some(remote);
                        entry.unwritten = true;
                    }
                    None => self.abandon(key, FailReason::NotFound, &mut acts),
                }
            }
            (Io::Writing, StoreReply::Put(Ok(version))) => {
                entry.io = Io::Idle;
                let done = entry.in_flight.take().expect("write in flight");
                entry.version = Some(version);
                entry.stored = Some(done.state);
                for w in done.waiters {
                    acts.push(reply(w.session, OpResult::ok(), w.acquired));
                }
                acts.extend(done.grants.into_iter().map(NodeAction::RespondTransfer));
                self.sync.note_write(key);
            }
            (Io::Writing, StoreReply::Put(Err(e))) => {
                entry.io = Io::Idle;
                let done = entry.in_flight.take().expect("write in flight");
                let reason = match e {
                    StoreError::Conflict { .. } => FailReason::Conflict,
                    _ => FailReason::Malformed,
                };
                for w in done.waiters {
                    acts.push(reply(w.session, OpResult::retry(reason), w.acquired));
                }
                for g in done.grants {
                    acts.push(NodeAction::RespondTransfer(denied(&g)));
                }
                // Nothing applied since the write is durable either: drop it
                // all and reload.
                Self::discard_working(entry, OpResult::retry(reason), &mut acts);
            }
            _ => {}
        }
        self.settle(key, &mut acts);
        acts
    }

    /// Sends every committed change not yet shipped to a reachable data
    /// center.
    pub fn propagate_tick(&mut self, reachable: impl Fn(ReplicaId) -> bool) -> Vec<NodeAction> {
        let from = self.dc;
        let pending = self.sync.drain(reachable);
        pending
            .into_iter()
            .filter_map(|(to, key)| {
                let state = self.entries.get(&key)?.stored.as_ref()?;
                Some(NodeAction::Propagate {
                    to,
                    msg: SyncMessage {
                        key,
                        state: state.encode(),
                        from,
                    },
                })
            })
            .collect()
    }

    /// Asynchronous rights requests for cached counters short of rights.
    pub fn rebalance_tick(&mut self) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        for (key, entry) in &self.entries {
            if entry.retiring {
                continue;
            }
            let Some(view) = &entry.working else { continue };
            for req in transfer::rebalance_requests(key, view, self.dc, self.config.rebalance_threshold) {
                let visible = view.local_rights(req.grantor).unwrap_or(0);
                acts.push(NodeAction::SendTransfer { req, visible });
            }
        }
        acts
    }

    /// Gives up keys this node no longer owns. Clients waiting on them are
    /// told to re-route; a write already in flight still completes.
    pub fn retain_owned(&mut self, owns: impl Fn(&str) -> bool) -> Vec<NodeAction> {
        let mut acts = Vec::new();
        let keys: Vec<String> = self.entries.keys().filter(|k| !owns(k)).cloned().collect();
        for key in keys {
            let entry = self.entries.get_mut(&key).expect("listed");
            let stale = OpResult::retry(FailReason::StaleOwner);
            Self::discard_working(entry, stale, &mut acts);
            while let Some(p) = entry.queue.pop_front() {
                match p {
                    Pending::Op(r, acquired) => acts.push(reply(r.session, stale, acquired)),
                    Pending::Transfer(t) => acts.push(NodeAction::RespondTransfer(
                        TransferResponse::empty(&t, TransferStatus::Denied),
                    )),
                }
            }
            if let Some(a) = entry.acquisition.take() {
                acts.push(reply(a.request.session, stale, true));
                for r in a.blocked {
                    acts.push(reply(r.session, stale, false));
                }
            }
            entry.retiring = true;
            if entry.io == Io::Idle {
                self.entries.remove(&key);
            }
        }
        acts
    }

    /// Unwritten operations and grants are dropped with `outcome`; the cache
    /// must be reloaded before further use.
    fn discard_working(entry: &mut Entry, outcome: OpResult, acts: &mut Vec<NodeAction>) {
        for w in entry.batch.drain(..) {
            acts.push(reply(w.session, outcome, w.acquired));
        }
        for g in entry.grants.drain(..) {
            acts.push(NodeAction::RespondTransfer(denied(&g)));
        }
        entry.working = None;
        entry.unwritten = false;
    }

    /// The key cannot be served: fail everything queued and forget it.
    fn abandon(&mut self, key: &str, reason: FailReason, acts: &mut Vec<NodeAction>) {
        let Some(entry) = self.entries.remove(key) else {
            return;
        };
        for p in entry.queue {
            match p {
                Pending::Op(r, acquired) => acts.push(reply(r.session, OpResult::fail(reason), acquired)),
                Pending::Transfer(t) => acts.push(NodeAction::RespondTransfer(TransferResponse::empty(
                    &t,
                    TransferStatus::Denied,
                ))),
            }
        }
        if let Some(a) = entry.acquisition {
            acts.push(reply(a.request.session, OpResult::fail(reason), true));
            for r in a.blocked {
                acts.push(reply(r.session, OpResult::fail(reason), false));
            }
        }
    }

    fn fold_remote(&mut self, key: &str, state: &BoundedCounter) {
        let entry = self.entries.get_mut(key).expect("entry exists");
        match &mut entry.remote {
            Some(remote) => {
                if remote.merge(state).is_err() {
                    return;
                }
            }
            None => entry.remote = Some(state.clone()),
        }
        if let Some(working) = &mut entry.working {
            if !state.leq(working).unwrap_or(true) && working.merge(state).is_ok() {
                entry.unwritten = true;
            }
        }
    }

    fn process_op(&mut self, key: &str, req: OpRequest, acquired: bool, acts: &mut Vec<NodeAction>) {
        let batching = self.config.batching;
        let max_batch = self.config.max_batch;
        let dc = self.dc;
        let entry = self.entries.get_mut(key).expect("entry exists");
        let busy = entry.io != Io::Idle || !entry.batch.is_empty();
        let full = max_batch > 0 && entry.batch.len() >= max_batch;
        if entry.working.is_none() || (!batching && busy) || full {
            entry.queue.push_back(Pending::Op(req, acquired));
            return;
        }
        let working = entry.working.as_mut().expect("loaded");
        match req.op.apply(working, dc) {
            Ok(()) => entry.batch.push(Waiter {
                session: req.session,
                op: req.op,
                acquired,
            }),
            Err(CounterError::NotEnoughRights { .. }) => match req.flag {
                OpFlag::Local => {
                    let result = OpResult::lacking_rights(working, dc, req.op);
                    acts.push(reply(req.session, result, acquired));
                }
                OpFlag::Global if acquired => {
                    acts.push(reply(req.session, OpResult::fail(FailReason::NotEnoughRights), true));
                }
                OpFlag::Global => match &mut entry.acquisition {
                    Some(a) => a.blocked.push_back(req),
                    None => {
                        let mut acq = SyncAcquisition::new(key, working.clone(), dc, req.op.delta);
                        match acq.start() {
                            AcquireStep::Send(t) => {
                                let visible = working.local_rights(t.grantor).unwrap_or(0);
                                acts.push(NodeAction::SendTransfer { req: t, visible });
                                entry.acquisition = Some(Acquisition {
                                    acq,
                                    request: req,
                                    blocked: VecDeque::new(),
                                });
                            }
                            AcquireStep::Done(_) => {
                                // Nobody visibly holds rights: fail without
                                // contacting anyone.
                                acts.push(reply(
                                    req.session,
                                    OpResult::fail(FailReason::NotEnoughRights),
                                    false,
                                ));
                            }
                        }
                    }
                },
            },
            Err(_) => acts.push(reply(req.session, OpResult::fail(FailReason::Malformed), acquired)),
        }
    }

    fn acquisition_step(&mut self, key: &str, step: AcquireStep, acts: &mut Vec<NodeAction>) {
        let entry = self.entries.get_mut(key).expect("entry exists");
        match step {
            AcquireStep::Send(t) => {
                let visible = entry
                    .acquisition
                    .as_ref()
                    .and_then(|a| a.acq.view().local_rights(t.grantor).ok())
                    .unwrap_or(0);
                acts.push(NodeAction::SendTransfer { req: t, visible });
            }
            AcquireStep::Done(granted) => {
                // Granted states were folded in as they arrived; the view
                // itself may contain unwritten local changes and is dropped.
                let a = entry.acquisition.take().expect("acquisition active");
                if granted.is_some() {
                    entry.queue.push_front(Pending::Op(a.request, true));
                    for (i, r) in a.blocked.into_iter().enumerate() {
                        entry.queue.insert(i + 1, Pending::Op(r, false));
                    }
                } else {
                    acts.push(reply(
                        a.request.session,
                        OpResult::fail(FailReason::NotEnoughRights),
                        true,
                    ));
                    for r in a.blocked {
                        acts.push(reply(r.session, OpResult::fail(FailReason::NotEnoughRights), false));
                    }
                }
            }
        }
    }

    fn serve_transfer(&mut self, key: &str, req: TransferRequest, acts: &mut Vec<NodeAction>) {
        let entry = self.entries.get_mut(key).expect("entry exists");
        let working = entry.working.as_mut().expect("loaded");
        let resp = transfer::handle_request(working, &req);
        if resp.status == TransferStatus::Granted {
            // Answer only once the grant is durable.
            entry.grants.push(resp);
        } else {
            acts.push(NodeAction::RespondTransfer(resp));
        }
    }

    /// Drains queued work, starts the next store call if idle, and drops a
    /// retired key once its last call is done.
    fn settle(&mut self, key: &str, acts: &mut Vec<NodeAction>) {
        let batching = self.config.batching;
        loop {
            let Some(entry) = self.entries.get_mut(key) else {
                return;
            };
            if entry.retiring {
                if entry.io == Io::Idle {
                    self.entries.remove(key);
                }
                return;
            }
            if entry.working.is_none() {
                if entry.io == Io::Idle {
                    entry.io = Io::Reading;
                    acts.push(NodeAction::Store {
                        key: key.to_owned(),
                        call: StoreCall::Get { key: key.to_owned() },
                        ops: Vec::new(),
                    });
                }
                return;
            }
            let busy = entry.io != Io::Idle || !entry.batch.is_empty();
            let next_is_blocked_op = matches!(entry.queue.front(), Some(Pending::Op(..)))
                && ((!batching && busy)
                    || (self.config.max_batch > 0 && entry.batch.len() >= self.config.max_batch));
            if !next_is_blocked_op {
                if let Some(p) = entry.queue.pop_front() {
                    match p {
                        Pending::Op(r, acquired) => self.process_op(key, r, acquired, acts),
                        Pending::Transfer(t) => self.serve_transfer(key, t, acts),
                    }
                    continue;
                }
            }
            let entry = self.entries.get_mut(key).expect("entry exists");
            let has_changes = !entry.batch.is_empty() || !entry.grants.is_empty() || entry.unwritten;
            if entry.io == Io::Idle && has_changes {
                let state = entry.working.clone().expect("loaded");
                let waiters = std::mem::take(&mut entry.batch);
                let ops = waiters.iter().map(|w| w.op).collect();
                entry.in_flight = Some(InFlight {
                    waiters,
                    grants: std::mem::take(&mut entry.grants),
                    state: state.clone(),
                });
                entry.unwritten = false;
                entry.io = Io::Writing;
                acts.push(NodeAction::Store {
                    key: key.to_owned(),
                    call: StoreCall::PutConditional {
                        key: key.to_owned(),
                        value: state.encode(),
                        expected: entry.version,
                    },
                    ops,
                });
                continue;
            }
            return;
        }
    }
}

fn denied(granted: &TransferResponse) -> TransferResponse {
    TransferResponse {
        status: TransferStatus::Denied,
        granted: 0,
        state: None,
        ..granted.clone()
    }
}

/// Whether `req` asks for rights synchronously.
pub fn is_sync(req: &TransferRequest) -> bool {
    req.mode == TransferMode::Sync
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::OpStatus;
    use crate::crdt::Polarity;
    use crate::store::Store;

    const KEY: &str = "k";

    fn config(batching: bool) -> ServerConfig {
        ServerConfig {
            replicas: 3,
            batching,
            max_batch: 0,
            rebalance_threshold: 2,
        }
    }

    fn store_with(counter: &BoundedCounter) -> Store {
        let mut s = Store::new();
        s.put_conditional(KEY, counter.encode(), None).unwrap();
        s
    }

    fn dec(session: u64, delta: i64, flag: OpFlag) -> OpRequest {
        OpRequest {
            session: SessionId(session),
            key: KEY.into(),
            op: CounterOp::dec(delta),
            flag,
        }
    }

    /// Executes every store action immediately and returns the other actions.
    fn run(node: &mut OwnerNode, store: &mut Store, mut acts: Vec<NodeAction>) -> Vec<NodeAction> {
        let mut out = Vec::new();
        while let Some(a) = acts.pop() {
            match a {
                NodeAction::Store { key, call, .. } => {
                    let r = store.execute(&call);
                    acts.extend(node.on_store_reply(&key, r));
                }
                other => out.push(other),
            }
        }
        out
    }

    fn replies(acts: &[NodeAction]) -> Vec<(u64, OpStatus)> {
        // Sorted by session.
        let mut v: Vec<_> = acts
            .iter()
            .filter_map(|a| match a {
                NodeAction::Reply { session, result, .. } => Some((session.0, result.status)),
                _ => None,
            })
            .collect();
        v.sort_by_key(|r| r.0);
        v
    }

    #[test]
    fn routing_is_stable_and_reconfiguration_moves_keys() {
        let mut t = OwnerTable::new(3);
        let keys: Vec<String> = (0..1000).map(|i| format!("key{i}")).collect();
        let before: Vec<_> = keys.iter().map(|k| t.route(k).unwrap()).collect();
        let again: Vec<_> = keys.iter().map(|k| t.route(k).unwrap()).collect();
        assert_eq!(before, again);
        t.join(NodeId(3));
        assert_eq!(t.epoch(), 1);
        let after: Vec<_> = keys.iter().map(|k| t.route(k).unwrap()).collect();
        let moved = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        assert!(moved > 0);
        // Rendezvous hashing only moves keys onto the new node.
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a == b || *b == NodeId(3)));
        t.leave(NodeId(3));
        let back: Vec<_> = keys.iter().map(|k| t.route(k).unwrap()).collect();
        assert_eq!(before, back);
        assert_eq!(t.epoch(), 2);
    }

    #[test]
    fn routing_is_roughly_uniform() {
        let nodes = 5;
        let t = OwnerTable::new(nodes);
        let mut counts = vec![0f64; nodes];
        let total = 10_000;
        for i in 0..total {
            counts[t.route(&format!("counter-{i}")).unwrap().0 as usize] += 1.0;
        }
        let expected = total as f64 / nodes as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 18.47, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn cold_op_reads_once_and_writes_once() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(true));
        let acts = node.on_request(dec(1, 1, OpFlag::Global));
        let out = run(&mut node, &mut store, acts);
        assert_eq!(replies(&out), vec![(1, OpStatus::Ok)]);
        assert_eq!(store.stats().conditional_writes, 2); // the install plus one
        let stored = decode_record(store.peek(KEY).unwrap()).unwrap();
        assert_eq!(stored.value(), 9);
    }

    /// Holds store actions back so several operations arrive during one write.
    #[test]
    fn batching_folds_ops_into_one_write() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 100).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(true));
        let acts = node.on_request(dec(1, 1, OpFlag::Global));
        let out = run(&mut node, &mut store, acts);
        assert_eq!(replies(&out), vec![(1, OpStatus::Ok)]);

        let mut held = node.on_request(dec(2, 1, OpFlag::Global));
        assert_eq!(held.len(), 1);
        for s in 3..=10 {
            assert!(node.on_request(dec(s, 2, OpFlag::Global)).is_empty());
        }
        let writes_before = store.stats().conditional_writes;
        let first = held.pop().unwrap();
        let out = run(&mut node, &mut store, vec![first]);
        // The in-flight write answered session 2; the nine others rode on
        // exactly one more write.
        assert_eq!(replies(&out).len(), 9);
        assert_eq!(store.stats().conditional_writes - writes_before, 2);
        let stored = decode_record(store.peek(KEY).unwrap()).unwrap();
        assert_eq!(stored.value(), 100 - 1 - 1 - 8 * 2);
        assert_eq!(node.working(KEY), Some(&stored));
    }

    #[test]
    fn without_batching_every_op_has_its_own_write() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 100).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(false));
        let mut pending = Vec::new();
        for s in 1..=5 {
            pending.extend(node.on_request(dec(s, 1, OpFlag::Global)));
        }
        let mut op_writes = 0;
        let mut ok = 0;
        while let Some(a) = pending.pop() {
            match a {
                NodeAction::Store { key, call, ops } => {
                    if call.is_write() {
                        assert_eq!(ops.len(), 1);
                        op_writes += 1;
                    }
                    pending.extend(node.on_store_reply(&key, store.execute(&call)));
                }
                NodeAction::Reply { result, .. } => {
                    assert!(result.is_ok());
                    ok += 1;
                }
                _ => {}
            }
        }
        assert_eq!((op_writes, ok), (5, 5));
    }

    #[test]
    fn conflict_retries_waiters_and_reloads() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(true));
        let acts = node.on_request(dec(1, 1, OpFlag::Global));
        let read = acts.into_iter().next().unwrap();
        let NodeAction::Store { call, .. } = read else { panic!() };
        let mut acts = node.on_store_reply(KEY, store.execute(&call));
        let NodeAction::Store { call: write, .. } = acts.pop().unwrap() else { panic!() };
        // Another owner sneaks in a write.
        let mut rival = c.clone();
        rival.decrement(ReplicaId(0), 4).unwrap();
        let v = store.peek(KEY).unwrap().version;
        store.put_conditional(KEY, rival.encode(), Some(v)).unwrap();
        assert!(node.on_request(dec(2, 1, OpFlag::Global)).is_empty());
        let acts = node.on_store_reply(KEY, store.execute(&write));
        assert_eq!(
            replies(&acts),
            vec![(1, OpStatus::Retry), (2, OpStatus::Retry)]
        );
        // The node reloads and then serves new requests on the rival's state.
        let mut all = acts;
        all.extend(node.on_request(dec(3, 1, OpFlag::Global)));
        let out = run(&mut node, &mut store, all);
        assert!(replies(&out).contains(&(3, OpStatus::Ok)));
        let stored = decode_record(store.peek(KEY).unwrap()).unwrap();
        assert_eq!(stored.value(), 5);
    }

    #[test]
    fn no_visible_rights_fails_without_messages() {
        let mut c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 2).unwrap();
        c.decrement(ReplicaId(0), 2).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(1), config(true));
        let acts = node.on_request(dec(1, 1, OpFlag::Global));
        let out = run(&mut node, &mut store, acts);
        assert_eq!(out.len(), 1);
        assert!(matches!(
            out[0],
            NodeAction::Reply { result, acquired: false, .. }
                if result == OpResult::fail(FailReason::NotEnoughRights)
        ));
    }

    #[test]
    fn sync_acquisition_then_success() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        let mut s0 = store_with(&c);
        let mut s1 = store_with(&c);
        let mut n0 = OwnerNode::new(ReplicaId(0), config(true));
        let mut n1 = OwnerNode::new(ReplicaId(1), config(true));
        let acts = n1.on_request(dec(1, 3, OpFlag::Global));
        let out = run(&mut n1, &mut s1, acts);
        let [NodeAction::SendTransfer { req, visible }] = out.as_slice() else {
            panic!("{out:?}")
        };
        assert_eq!(*visible, 10);
        assert_eq!(req.amount, 5);
        // Grantor answers only after its write commits.
        let acts = n0.on_transfer_request(req.clone());
        assert!(acts.iter().all(|a| matches!(a, NodeAction::Store { .. })));
        let out0 = run(&mut n0, &mut s0, acts);
        let [NodeAction::RespondTransfer(resp)] = out0.as_slice() else {
            panic!("{out0:?}")
        };
        assert_eq!(resp.granted, 5);
        let acts = n1.on_transfer_response(resp);
        let out1 = run(&mut n1, &mut s1, acts);
        assert!(matches!(
            out1.as_slice(),
            [NodeAction::Reply { result, acquired: true, .. }] if result.is_ok()
        ));
        let stored = decode_record(s1.peek(KEY).unwrap()).unwrap();
        assert_eq!(stored.local_rights(ReplicaId(1)).unwrap(), 2);
        assert_eq!(stored.value(), 7);
    }

    #[test]
    fn propagation_sends_one_message_per_counter() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 1000).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(true));
        for s in 0..100 {
            let acts = node.on_request(dec(s, 1, OpFlag::Global));
            run(&mut node, &mut store, acts);
        }
        let msgs = node.propagate_tick(|_| true);
        assert_eq!(msgs.len(), 2); // one per other data center
        for m in &msgs {
            let NodeAction::Propagate { msg, .. } = m else { panic!() };
            assert_eq!(BoundedCounter::decode(&msg.state).unwrap().value(), 900);
        }
        assert!(node.propagate_tick(|_| true).is_empty());
    }

    #[test]
    fn remote_state_is_merged_and_written() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(1), config(true));
        let mut remote = c.clone();
        remote.decrement(ReplicaId(0), 4).unwrap();
        let acts = node.on_remote_state(KEY, &remote.encode());
        run(&mut node, &mut store, acts);
        let stored = decode_record(store.peek(KEY).unwrap()).unwrap();
        assert_eq!(stored, remote);
        // A duplicate changes nothing and issues no write.
        let writes = store.stats().conditional_writes;
        let acts = node.on_remote_state(KEY, &remote.encode());
        run(&mut node, &mut store, acts);
        assert_eq!(store.stats().conditional_writes, writes);
    }

    #[test]
    fn retiring_releases_waiting_clients() {
        let c = BoundedCounter::new(Polarity::Lower, 0, 3, ReplicaId(0), 10).unwrap();
        let mut store = store_with(&c);
        let mut node = OwnerNode::new(ReplicaId(0), config(true));
        let acts = node.on_request(dec(1, 1, OpFlag::Global));
        let out = node.retain_owned(|_| false);
        assert_eq!(replies(&out), vec![(1, OpStatus::Retry)]);
        // The outstanding read completes and the key is dropped.
        let out = run(&mut node, &mut store, acts);
        assert!(out.is_empty());
        assert_eq!(node.cached().count(), 0);
    }
}
