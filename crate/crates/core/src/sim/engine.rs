//! The event loop and the five strategies it can drive.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::api::{CounterOp, FailReason, OpResult, OpStatus};
use crate::client::{decode_record, GrantDriver, MergeDriver, RmwStep, SyncAgent, SyncMessage, ClientStep, UpdateDriver};
use crate::crdt::{BoundedCounter, Polarity, ReplicaId};
use crate::server::{NodeAction, NodeId, OpRequest, OwnerNode, OwnerTable, ServerConfig, SessionId};
use crate::store::{Store, StoreCall, StoreError, StoreReply};
use crate::time::{SimTime, Span};
use crate::transfer::{self, AcquireStep, SyncAcquisition, TransferMode, TransferRequest, TransferResponse};

use super::config::{Fault, SimConfig, Strategy};
use super::metrics::{self, Metrics, MetricsRow, OpRecord, Report};
use super::weak::PnCounter;
use super::SimError;

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub rows: Vec<MetricsRow>,
    pub report: Report,
}

impl SimOutput {
    pub fn csv(&self) -> String {
        metrics::to_csv(&self.rows)
    }
}

/// Runs one simulation to completion.
pub fn run(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let mut engine = Engine::new(config.clone());
    engine.init();
    while let Some(next) = engine.queue.pop() {
        if next.at > engine.end {
            break;
        }
        engine.now = next.at;
        engine.handle(next.ev);
    }
    engine.now = engine.end;
    Ok(engine.finish())
}

/// Who receives a store reply.
#[derive(Debug, Clone)]
enum Caller {
    /// A client's own update driver (client middleware or weak read).
    Client { client: u32, seq: u64 },
    /// The home data center serving a strong client.
    Strong { client: u32, seq: u64 },
    Node { dc: usize, node: u32, incarnation: u64 },
    Merge { dc: usize },
    Grant { id: u64 },
}

#[derive(Debug, Clone)]
enum Msg {
    Sync(SyncMessage),
    /// `tag` names the waiting client for synchronous client-middleware
    /// requests.
    Request { req: TransferRequest, tag: Option<(u32, u64)> },
    Response { resp: TransferResponse, tag: Option<(u32, u64)> },
}

#[derive(Debug, Clone)]
enum Ev {
    Wake(u32),
    ClientTimeout { client: u32, seq: u64 },
    ClientReply { client: u32, seq: u64, result: OpResult, acquired: bool },
    StrongArrive { client: u32, seq: u64 },
    Store { dc: usize, call: StoreCall, caller: Caller, ops: Vec<CounterOp> },
    NodeRequest { dc: usize, node: u32, req: OpRequest },
    Deliver { to: usize, msg: Msg },
    AcqTimeout { client: u32, seq: u64, serial: u64, grantor: ReplicaId },
    NodeAcqTimeout { dc: usize, key: String, serial: u64, grantor: ReplicaId },
    WeakApply { client: u32, seq: u64 },
    WeakMerge { dc: usize, key: String, state: Vec<u8> },
    SyncTick,
    RebalanceTick,
    LoadEnd,
    FaultStart(usize),
    FaultEnd(usize),
    CrashDetected(usize),
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest event, ties by insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug)]
struct Current {
    key: usize,
    op: CounterOp,
    started: SimTime,
    sync: bool,
    reroutes: u8,
    driver: Option<UpdateDriver>,
    acq: Option<SyncAcquisition>,
    acq_serial: u64,
}

#[derive(Debug)]
struct Client {
    dc: usize,
    seq: u64,
    current: Option<Current>,
}

struct Slot {
    node: Option<OwnerNode>,
    incarnation: u64,
}

struct Grant {
    dc: usize,
    driver: GrantDriver,
    tag: Option<(u32, u64)>,
}

struct MergeSlot {
    driver: MergeDriver,
    /// States that arrived after the driver read the store.
    pending: Option<BoundedCounter>,
}

/// Watches committed operations; sends no messages.
struct Observer {
    values: Vec<i64>,
    depleted_at: Option<SimTime>,
    known_at: Option<SimTime>,
    quiescent_at: SimTime,
    equal_since: Option<SimTime>,
}

const MAX_REROUTES: u8 = 3;

struct Engine {
    cfg: SimConfig,
    n: usize,
    keys: Vec<String>,
    key_index: BTreeMap<String, usize>,
    rng: ChaCha8Rng,
    now: SimTime,
    end: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    stores: Vec<Store>,
    clients: Vec<Client>,
    load_over: bool,
    partitions: Vec<Option<Vec<u32>>>,
    threshold: i64,
    agents: Vec<SyncAgent>,
    merges: Vec<BTreeMap<String, MergeSlot>>,
    grants: BTreeMap<u64, Grant>,
    next_grant: u64,
    tables: Vec<OwnerTable>,
    nodes: Vec<Vec<Slot>>,
    node_serials: BTreeMap<(usize, String), u64>,
    metrics: Metrics,
    observer: Observer,
    op_log: Vec<OpRecord>,
}

fn session(client: u32, seq: u64) -> SessionId {
    SessionId((client as u64) << 32 | (seq & 0xffff_ffff))
}

impl Engine {
    fn new(cfg: SimConfig) -> Self {
        let n = cfg.dcs();
        let keys: Vec<String> = (0..cfg.counters).map(|i| format!("c{i}")).collect();
        let key_index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let threshold = cfg
            .rebalance_threshold
            .unwrap_or_else(|| transfer::default_threshold(cfg.initial, cfg.bound, n));
        let end = SimTime::from_ms(cfg.duration_ms + cfg.drain_ms);
        Engine {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            n,
            key_index,
            now: SimTime::ZERO,
            end,
            seq: 0,
            queue: BinaryHeap::new(),
            stores: (0..n).map(|_| Store::new()).collect(),
            clients: (0..cfg.clients)
                .map(|c| Client {
                    dc: c as usize % n,
                    seq: 0,
                    current: None,
                })
                .collect(),
            load_over: false,
            partitions: vec![None; cfg.faults.len()],
            threshold,
            agents: (0..n).map(|d| SyncAgent::new(ReplicaId(d as u32), n)).collect(),
            merges: (0..n).map(|_| BTreeMap::new()).collect(),
            grants: BTreeMap::new(),
            next_grant: 0,
            tables: (0..n).map(|_| OwnerTable::new(cfg.nodes_per_dc as usize)).collect(),
            nodes: Vec::new(),
            node_serials: BTreeMap::new(),
            metrics: Metrics::new(cfg.bucket_ms, n),
            observer: Observer {
                values: vec![cfg.initial; keys.len()],
                depleted_at: None,
                known_at: None,
                quiescent_at: SimTime::from_ms(cfg.duration_ms),
                equal_since: None,
            },
            op_log: Vec::new(),
            keys,
            cfg,
        }
    }

    fn schedule(&mut self, after: Span, ev: Ev) {
        self.schedule_at(self.now + after, ev);
    }

    fn schedule_at(&mut self, at: SimTime, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, ev });
    }

    fn bounded(&self) -> bool {
        matches!(
            self.cfg.strategy,
            Strategy::Bcclt | Strategy::Bcsrv | Strategy::BcsrvNobatch
        )
    }

    fn init(&mut self) {
        let cfg = self.cfg.clone();
        for key in self.keys.clone() {
            match cfg.strategy {
                Strategy::Weak => {
                    let bytes = PnCounter::new(cfg.initial, self.n).encode();
                    for store in &mut self.stores {
                        store.put(&key, bytes.clone(), None).expect("fresh store");
                    }
                }
                Strategy::Strong => {
                    let home = cfg.strong_home_dc as usize;
                    self.stores[home]
                        .put_conditional(&key, cfg.initial.to_le_bytes().to_vec(), None)
                        .expect("fresh store");
                }
                _ => {
                    let state =
                        BoundedCounter::new(cfg.polarity, cfg.bound, self.n, ReplicaId(0), cfg.initial)
                            .expect("validated config");
                    for store in &mut self.stores {
                        store
                            .put_conditional(&key, state.encode(), None)
                            .expect("fresh store");
                    }
                }
            }
        }
        if cfg.strategy.uses_owner_nodes() {
            let server = self.server_config();
            self.nodes = (0..self.n)
                .map(|d| {
                    (0..cfg.nodes_per_dc)
                        .map(|_| Slot {
                            node: Some(OwnerNode::new(ReplicaId(d as u32), server.clone())),
                            incarnation: 0,
                        })
                        .collect()
                })
                .collect();
        }
        for c in 0..cfg.clients {
            let offset = if cfg.think_ms > 0.0 {
                self.rng.gen_range(0.0..cfg.think_ms)
            } else {
                0.0
            };
            self.schedule(Span::from_ms(offset), Ev::Wake(c));
        }
        if cfg.strategy != Strategy::Strong {
            self.schedule(Span::from_ms(cfg.sync_period_ms), Ev::SyncTick);
        }
        if self.bounded() {
            self.schedule(Span::from_ms(cfg.rebalance_period_ms), Ev::RebalanceTick);
        }
        self.schedule(Span::from_ms(cfg.duration_ms), Ev::LoadEnd);
        for (i, f) in cfg.faults.iter().enumerate() {
            let (start, end) = match f {
                Fault::Partition { start_ms, end_ms, .. } | Fault::Crash { start_ms, end_ms, .. } => {
                    (*start_ms, *end_ms)
                }
            };
            self.schedule_at(SimTime::from_ms(start), Ev::FaultStart(i));
            self.schedule_at(SimTime::from_ms(end), Ev::FaultEnd(i));
        }
    }

    fn server_config(&self) -> ServerConfig {
        ServerConfig {
            replicas: self.n,
            batching: self.cfg.strategy == Strategy::Bcsrv,
            max_batch: self.cfg.max_batch,
            rebalance_threshold: self.threshold,
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Wake(c) => self.start_op(c),
            Ev::ClientTimeout { client, seq } => {
                if self.is_current(client, seq) {
                    self.complete(client, OpResult::retry(FailReason::Timeout), None);
                }
            }
            Ev::ClientReply {
                client,
                seq,
                result,
                acquired,
            } => self.on_client_reply(client, seq, result, acquired),
            Ev::StrongArrive { client, seq } => {
                if let Some(cur) = self.current(client, seq) {
                    let key = self.keys[cur.key].clone();
                    let home = self.cfg.strong_home_dc as usize;
                    self.store_call(home, StoreCall::Get { key }, Caller::Strong { client, seq }, Vec::new());
                }
            }
            Ev::Store { dc, call, caller, ops } => self.exec_store(dc, call, caller, ops),
            Ev::NodeRequest { dc, node, req } => self.on_node_request(dc, node, req),
            Ev::Deliver { to, msg } => self.deliver(to, msg),
            Ev::AcqTimeout {
                client,
                seq,
                serial,
                grantor,
            } => {
                let Some(cur) = self.current_mut(client, seq) else { return };
                if cur.acq_serial != serial {
                    return;
                }
                let step = cur.acq.as_mut().and_then(|a| a.on_timeout(grantor));
                if let Some(step) = step {
                    self.client_acquire_step(client, seq, step);
                }
            }
            Ev::NodeAcqTimeout {
                dc,
                key,
                serial,
                grantor,
            } => {
                if self.node_serials.get(&(dc, key.clone())) != Some(&serial) {
                    return;
                }
                if let Some(node) = self.owner(dc, &key) {
                    let acts = self.node_mut(dc, node).on_transfer_timeout(&key, grantor);
                    self.node_actions(dc, node, acts);
                }
            }
            Ev::WeakApply { client, seq } => self.weak_apply(client, seq),
            Ev::WeakMerge { dc, key, state } => self.weak_merge(dc, &key, &state),
            Ev::SyncTick => self.sync_tick(),
            Ev::RebalanceTick => self.rebalance_tick(),
            Ev::LoadEnd => {
                self.load_over = true;
                self.check_convergence();
            }
            Ev::FaultStart(i) => self.fault_start(i),
            Ev::FaultEnd(i) => self.fault_end(i),
            Ev::CrashDetected(i) => {
                let Fault::Crash { dc, node, .. } = self.cfg.faults[i].clone() else { return };
                let dc = dc as usize;
                if self.nodes[dc][node as usize].node.is_none() {
                    self.tables[dc].leave(NodeId(node));
                    self.reconfigure(dc);
                }
            }
        }
    }

    // ---- clients ----

    fn current(&self, client: u32, seq: u64) -> Option<&Current> {
        let c = &self.clients[client as usize];
        if c.seq == seq {
            c.current.as_ref()
        } else {
            None
        }
    }

    fn current_mut(&mut self, client: u32, seq: u64) -> Option<&mut Current> {
        let c = &mut self.clients[client as usize];
        if c.seq == seq {
            c.current.as_mut()
        } else {
            None
        }
    }

    fn is_current(&self, client: u32, seq: u64) -> bool {
        self.current(client, seq).is_some()
    }

    fn start_op(&mut self, client: u32) {
        if self.load_over {
            return;
        }
        let key = self.rng.gen_range(0..self.keys.len());
        let op = if self.rng.gen_bool(self.cfg.inc_fraction) {
            CounterOp::inc(self.cfg.delta)
        } else {
            CounterOp::dec(self.cfg.delta)
        };
        let c = &mut self.clients[client as usize];
        c.seq += 1;
        let seq = c.seq;
        let dc = c.dc;
        c.current = Some(Current {
            key,
            op,
            started: self.now,
            sync: false,
            reroutes: 0,
            driver: None,
            acq: None,
            acq_serial: 0,
        });
        self.metrics.op_started(self.now);
        let key_name = self.keys[key].clone();
        match self.cfg.strategy {
            Strategy::Weak => {
                self.store_call(dc, StoreCall::Get { key: key_name }, Caller::Client { client, seq }, Vec::new());
            }
            Strategy::Bcclt => {
                let mut driver = UpdateDriver::new(
                    &key_name,
                    ReplicaId(dc as u32),
                    op,
                    self.cfg.flag,
                    self.cfg.retry_limit,
                );
                let step = driver.start();
                self.current_mut(client, seq).expect("just set").driver = Some(driver);
                self.client_step(client, seq, step);
            }
            Strategy::Bcsrv | Strategy::BcsrvNobatch => {
                self.send_to_owner(client, seq);
                let timeout = Span::from_ms(self.cfg.client_timeout_ms);
                self.schedule(timeout, Ev::ClientTimeout { client, seq });
            }
            Strategy::Strong => {
                let leg = self.strong_leg(dc);
                self.schedule(leg, Ev::StrongArrive { client, seq });
                let timeout = Span::from_ms(self.cfg.client_timeout_ms);
                self.schedule(timeout, Ev::ClientTimeout { client, seq });
            }
        }
    }

    fn complete(&mut self, client: u32, result: OpResult, acquired: Option<bool>) {
        let c = &mut self.clients[client as usize];
        let Some(cur) = c.current.take() else { return };
        let dc = c.dc;
        let sync = acquired.unwrap_or(false) || cur.sync;
        self.metrics
            .op_finished(cur.started, self.now, dc, result.status, result.reason, sync);
        if self.cfg.op_log {
            self.op_log.push(OpRecord {
                client,
                dc: dc as u32,
                key: self.keys[cur.key].clone(),
                kind: cur.op.kind,
                delta: cur.op.delta,
                start_ms: cur.started.as_ms(),
                end_ms: self.now.as_ms(),
                status: result.status,
                reason: result.reason,
                sync_transfer: sync,
            });
        }
        let think = Span::from_ms(self.cfg.think_ms);
        self.schedule(think, Ev::Wake(client));
    }

    fn on_client_reply(&mut self, client: u32, seq: u64, result: OpResult, acquired: bool) {
        if !self.is_current(client, seq) {
            return;
        }
        if result.status == OpStatus::Retry && result.reason == Some(FailReason::StaleOwner) {
            let cur = self.current_mut(client, seq).expect("checked");
            cur.sync |= acquired;
            if cur.reroutes < MAX_REROUTES {
                cur.reroutes += 1;
                self.send_to_owner(client, seq);
                return;
            }
        }
        self.complete(client, result, Some(acquired));
    }

    /// Strong clients reach the home data center in one hop.
    fn strong_leg(&mut self, dc: usize) -> Span {
        let home = self.cfg.strong_home_dc as usize;
        if dc == home {
            Span::from_ms(self.cfg.hop_ms)
        } else {
            self.one_way(dc, home)
        }
    }

    fn client_step(&mut self, client: u32, seq: u64, step: ClientStep) {
        let dc = self.clients[client as usize].dc;
        match step {
            ClientStep::Store(call) => {
                let ops = match &call {
                    StoreCall::Get { .. } => Vec::new(),
                    _ => vec![self.current(client, seq).expect("active").op],
                };
                self.store_call(dc, call, Caller::Client { client, seq }, ops);
            }
            ClientStep::Acquire { view, needed } => {
                let key = self.keys[self.current(client, seq).expect("active").key].clone();
                let mut acq = SyncAcquisition::new(&key, view, ReplicaId(dc as u32), needed);
                let step = acq.start();
                self.current_mut(client, seq).expect("active").acq = Some(acq);
                self.client_acquire_step(client, seq, step);
            }
            ClientStep::Done(result) => self.complete(client, result, None),
        }
    }

    fn client_acquire_step(&mut self, client: u32, seq: u64, step: AcquireStep) {
        let dc = self.clients[client as usize].dc;
        match step {
            AcquireStep::Send(req) => {
                let cur = self.current_mut(client, seq).expect("active");
                cur.sync = true;
                cur.acq_serial += 1;
                let serial = cur.acq_serial;
                let visible = cur
                    .acq
                    .as_ref()
                    .and_then(|a| a.view().local_rights(req.grantor).ok())
                    .unwrap_or(0);
                let grantor = req.grantor;
                self.send_request(dc, req, visible, Some((client, seq)));
                let wait = Span::from_ms(2.0 * self.cfg.rtt_ms[dc][grantor.index()]);
                self.schedule(
                    wait,
                    Ev::AcqTimeout {
                        client,
                        seq,
                        serial,
                        grantor,
                    },
                );
            }
            AcquireStep::Done(granted) => {
                let cur = self.current_mut(client, seq).expect("active");
                cur.acq = None;
                let step = cur.driver.as_mut().expect("client middleware").on_acquired(granted);
                self.client_step(client, seq, step);
            }
        }
    }

    fn send_to_owner(&mut self, client: u32, seq: u64) {
        let dc = self.clients[client as usize].dc;
        let cur = self.current(client, seq).expect("active");
        let key = self.keys[cur.key].clone();
        let req = OpRequest {
            session: session(client, seq),
            key: key.clone(),
            op: cur.op,
            flag: self.cfg.flag,
        };
        // With no live node the request goes nowhere and the client times out.
        if let Some(NodeId(node)) = self.tables[dc].route(&key) {
            let hop = Span::from_ms(self.cfg.hop_ms);
            self.schedule(hop, Ev::NodeRequest { dc, node, req });
        }
    }

    // ---- store ----

    fn store_call(&mut self, dc: usize, call: StoreCall, caller: Caller, ops: Vec<CounterOp>) {
        let timing = self.cfg.store.clone();
        let jitter = timing.jitter(&mut self.rng);
        let at = if call.is_write() {
            let now = self.now;
            self.stores[dc].reserve_write(call.key(), now, &timing, jitter)
        } else {
            self.now + Span::from_ms(timing.read_ms) + jitter
        };
        self.schedule_at(at, Ev::Store { dc, call, caller, ops });
    }

    /// Canonical bytes of what `dc` stores for `key`.
    fn stored_state(&self, dc: usize, key: &str) -> Option<Vec<u8>> {
        let record = self.stores[dc].peek(key).ok()?;
        match self.cfg.strategy {
            Strategy::Weak => PnCounter::from_record(record).map(|s| s.encode()),
            Strategy::Strong => Some(record.value().to_vec()),
            _ => decode_record(record).ok().map(|s| s.encode()),
        }
    }

    fn exec_store(&mut self, dc: usize, call: StoreCall, caller: Caller, ops: Vec<CounterOp>) {
        let key = call.key().to_owned();
        let before = if call.is_write() && self.load_over && ops.is_empty() && self.bounded() {
            self.stores[dc].peek(&key).ok().and_then(|r| decode_record(r).ok())
        } else {
            None
        };
        let reply = self.stores[dc].execute(&call);
        if let StoreReply::Put(result) = &reply {
            let conditional = matches!(call, StoreCall::PutConditional { .. });
            let conflict = matches!(result, Err(StoreError::Conflict { .. }));
            self.metrics
                .store_write(self.now, conditional, conflict, !ops.is_empty());
            if result.is_ok() {
                let authored = !ops.is_empty()
                    || before.is_some_and(|old| {
                        self.stores[dc]
                            .peek(&key)
                            .ok()
                            .and_then(|r| decode_record(r).ok())
                            .is_some_and(|new| row_differs(&old, &new, dc))
                    });
                self.commit(&key, &ops, authored);
            }
        }
        match caller {
            Caller::Client { client, seq } => {
                if self.cfg.strategy == Strategy::Weak {
                    self.weak_read(client, seq, reply);
                    return;
                }
                let Some(cur) = self.current_mut(client, seq) else { return };
                let step = cur.driver.as_mut().expect("client middleware").on_reply(reply);
                if matches!(step, ClientStep::Done(r) if r.is_ok()) {
                    self.agents[dc].note_write(&key);
                }
                self.client_step(client, seq, step);
            }
            Caller::Strong { client, seq } => self.strong_reply(client, seq, reply),
            Caller::Node { dc, node, incarnation } => {
                let slot = &mut self.nodes[dc][node as usize];
                if slot.incarnation != incarnation {
                    return;
                }
                let Some(n) = slot.node.as_mut() else { return };
                let acts = n.on_store_reply(&key, reply);
                self.node_actions(dc, node, acts);
            }
            Caller::Merge { dc } => {
                let Some(slot) = self.merges[dc].get_mut(&key) else { return };
                match slot.driver.on_reply(reply) {
                    RmwStep::Store(call) => self.store_call(dc, call, Caller::Merge { dc }, Vec::new()),
                    RmwStep::Done(_) => {
                        let slot = self.merges[dc].remove(&key).expect("present");
                        if let Some(more) = slot.pending {
                            self.start_merge(dc, &key, more);
                        }
                    }
                }
            }
            Caller::Grant { id } => {
                let Some(grant) = self.grants.get_mut(&id) else { return };
                match grant.driver.on_reply(reply) {
                    RmwStep::Store(call) => {
                        let gdc = grant.dc;
                        self.store_call(gdc, call, Caller::Grant { id }, Vec::new());
                    }
                    RmwStep::Done(resp) => {
                        let grant = self.grants.remove(&id).expect("present");
                        if resp.granted > 0 {
                            self.agents[grant.dc].note_write(&key);
                        }
                        let to = resp.requester.index();
                        self.metrics.transfer_msg(self.now);
                        self.send(grant.dc, to, Msg::Response { resp, tag: grant.tag });
                    }
                }
            }
        }
    }

    /// Records committed operations with the observer.
    fn commit(&mut self, key: &str, ops: &[CounterOp], authored: bool) {
        let k = self.key_index[key];
        for op in ops {
            let before = self.observer.values[k];
            let after = before + op.effect();
            self.observer.values[k] = after;
            let slack = |v: i64| match self.cfg.polarity {
                Polarity::Lower => v - self.cfg.bound,
                Polarity::Upper => self.cfg.bound - v,
            };
            if slack(after) < 0 && slack(after) < slack(before) {
                let excess = (-slack(after)).min(slack(before) - slack(after));
                self.metrics.violation(self.now, excess as u64);
            }
        }
        if !ops.is_empty() && self.observer.depleted_at.is_none() {
            let bound = self.cfg.bound;
            if self.observer.values.iter().all(|&v| v == bound) {
                self.observer.depleted_at = Some(self.now);
            }
        }
        if self.load_over {
            if authored {
                self.observer.quiescent_at = self.now;
            }
            self.check_convergence();
        }
    }

    fn check_convergence(&mut self) {
        let equal = self.all_equal();
        match (equal, self.observer.equal_since) {
            (true, None) => self.observer.equal_since = Some(self.now),
            (false, Some(_)) => self.observer.equal_since = None,
            _ => {}
        }
    }

    fn all_equal(&self) -> bool {
        if self.cfg.strategy == Strategy::Strong {
            return true;
        }
        self.keys.iter().all(|key| {
            let first = self.stored_state(0, key);
            (1..self.n).all(|d| self.stored_state(d, key) == first)
        })
    }

    // ---- weak baseline ----

    fn weak_read(&mut self, client: u32, seq: u64, reply: StoreReply) {
        let Some(cur) = self.current(client, seq) else { return };
        let op = cur.op;
        let key = self.keys[cur.key].clone();
        let dc = self.clients[client as usize].dc;
        let value = match reply {
            StoreReply::Get(Ok(record)) => PnCounter::from_record(&record).map(|s| s.value()),
            _ => None,
        };
        let Some(value) = value else {
            self.complete(client, OpResult::fail(FailReason::NotFound), None);
            return;
        };
        if !self.within_bound(value + op.effect()) && op_consumes(self.cfg.polarity, op) {
            self.complete(client, OpResult::fail(FailReason::BoundReached), None);
            return;
        }
        let timing = self.cfg.store.clone();
        let jitter = timing.jitter(&mut self.rng);
        let at = self.stores[dc].reserve_write(&key, self.now, &timing, jitter);
        self.schedule_at(at, Ev::WeakApply { client, seq });
    }

    /// The store's native counter update: merge siblings, add, write.
    fn weak_apply(&mut self, client: u32, seq: u64) {
        let Some(cur) = self.current(client, seq) else { return };
        let op = cur.op;
        let key = self.keys[cur.key].clone();
        let dc = self.clients[client as usize].dc;
        let record = self.stores[dc].peek(&key).expect("preinstalled").clone();
        let mut state = PnCounter::from_record(&record).expect("well-formed");
        state.apply(dc, op.effect());
        self.stores[dc]
            .put(&key, state.encode(), Some(record.version))
            .expect("weak key");
        self.metrics.store_write(self.now, false, false, true);
        self.agents[dc].note_write(&key);
        self.commit(&key, &[op], true);
        self.complete(client, OpResult::ok(), None);
    }

    fn weak_merge(&mut self, dc: usize, key: &str, state: &[u8]) {
        let Some(incoming) = PnCounter::decode(state) else { return };
        let record = self.stores[dc].peek(key).expect("preinstalled").clone();
        let mut local = PnCounter::from_record(&record).expect("well-formed");
        let before = local.clone();
        local.merge(&incoming);
        if local == before && record.siblings.len() == 1 {
            return;
        }
        self.stores[dc]
            .put(key, local.encode(), Some(record.version))
            .expect("weak key");
        self.metrics.store_write(self.now, false, false, false);
        self.commit(key, &[], false);
    }

    fn within_bound(&self, v: i64) -> bool {
        match self.cfg.polarity {
            Polarity::Lower => v >= self.cfg.bound,
            Polarity::Upper => v <= self.cfg.bound,
        }
    }

    // ---- strong baseline ----

    fn strong_reply(&mut self, client: u32, seq: u64, reply: StoreReply) {
        let Some(cur) = self.current(client, seq) else { return };
        let op = cur.op;
        let key = self.keys[cur.key].clone();
        let home = self.cfg.strong_home_dc as usize;
        let result = match reply {
            StoreReply::Get(Ok(record)) => {
                let value = i64::from_le_bytes(record.value().try_into().expect("8 bytes"));
                if op_consumes(self.cfg.polarity, op) && !self.within_bound(value + op.effect()) {
                    OpResult::fail(FailReason::BoundReached)
                } else {
                    let call = StoreCall::PutConditional {
                        key,
                        value: (value + op.effect()).to_le_bytes().to_vec(),
                        expected: Some(record.version),
                    };
                    self.store_call(home, call, Caller::Strong { client, seq }, vec![op]);
                    return;
                }
            }
            StoreReply::Get(Err(_)) => OpResult::fail(FailReason::NotFound),
            StoreReply::Put(Ok(_)) => OpResult::ok(),
            StoreReply::Put(Err(_)) => OpResult::fail(FailReason::Conflict),
        };
        let dc = self.clients[client as usize].dc;
        let leg = self.strong_leg(dc);
        self.schedule(
            leg,
            Ev::ClientReply {
                client,
                seq,
                result,
                acquired: false,
            },
        );
    }

    // ---- network ----

    fn partitioned(&self, a: usize, b: usize) -> bool {
        self.partitions.iter().flatten().any(|side| {
            side.contains(&(a as u32)) != side.contains(&(b as u32))
        })
    }

    fn one_way(&mut self, a: usize, b: usize) -> Span {
        let jitter = if self.cfg.net_jitter_ms > 0.0 {
            self.rng.gen_range(0.0..=self.cfg.net_jitter_ms)
        } else {
            0.0
        };
        Span::from_ms(self.cfg.rtt_ms[a][b] / 2.0 + jitter)
    }

    /// Sends unless a partition separates the two data centers, in which
    /// case the message is lost.
    fn send(&mut self, from: usize, to: usize, msg: Msg) {
        if self.partitioned(from, to) {
            return;
        }
        let delay = self.one_way(from, to);
        self.schedule(delay, Ev::Deliver { to, msg });
    }

    fn send_request(&mut self, from: usize, req: TransferRequest, visible: i64, tag: Option<(u32, u64)>) {
        self.metrics.transfer_msg(self.now);
        if visible <= 0 {
            self.metrics.requests_to_exhausted += 1;
        }
        let to = req.grantor.index();
        self.send(from, to, Msg::Request { req, tag });
    }

    fn deliver(&mut self, to: usize, msg: Msg) {
        match (self.cfg.strategy, msg) {
            (Strategy::Weak, Msg::Sync(m)) => {
                let timing = self.cfg.store.clone();
                let jitter = timing.jitter(&mut self.rng);
                let at = self.stores[to].reserve_write(&m.key, self.now, &timing, jitter);
                self.schedule_at(
                    at,
                    Ev::WeakMerge {
                        dc: to,
                        key: m.key,
                        state: m.state,
                    },
                );
            }
            (Strategy::Bcclt, Msg::Sync(m)) => {
                let Ok(state) = BoundedCounter::decode(&m.state) else { return };
                self.start_merge(to, &m.key, state);
            }
            (Strategy::Bcclt, Msg::Request { req, tag }) => {
                self.next_grant += 1;
                let id = self.next_grant;
                let mut driver = GrantDriver::new(req, self.cfg.retry_limit);
                let RmwStep::Store(call) = driver.start() else { unreachable!("grants start with a read") };
                self.grants.insert(id, Grant { dc: to, driver, tag });
                self.store_call(to, call, Caller::Grant { id }, Vec::new());
            }
            (Strategy::Bcclt, Msg::Response { resp, tag }) => {
                let Some((client, seq)) = tag else { return };
                let Some(cur) = self.current_mut(client, seq) else { return };
                let step = cur.acq.as_mut().and_then(|a| a.on_response(&resp));
                if let Some(step) = step {
                    self.client_acquire_step(client, seq, step);
                }
            }
            (Strategy::Bcsrv | Strategy::BcsrvNobatch, msg) => {
                let key = match &msg {
                    Msg::Sync(m) => m.key.clone(),
                    Msg::Request { req, .. } => req.key.clone(),
                    Msg::Response { resp, .. } => resp.key.clone(),
                };
                let Some(node) = self.owner(to, &key) else { return };
                let n = self.node_mut(to, node);
                let acts = match msg {
                    Msg::Sync(m) => n.on_remote_state(&m.key, &m.state),
                    Msg::Request { req, .. } => n.on_transfer_request(req),
                    Msg::Response { resp, .. } => n.on_transfer_response(&resp),
                };
                self.node_actions(to, node, acts);
            }
            _ => {}
        }
    }

    fn start_merge(&mut self, dc: usize, key: &str, state: BoundedCounter) {
        if let Some(slot) = self.merges[dc].get_mut(key) {
            match &mut slot.pending {
                Some(p) => {
                    let _ = p.merge(&state);
                }
                None => slot.pending = Some(state),
            }
            return;
        }
        let mut driver = MergeDriver::new(key, state, self.cfg.retry_limit);
        let RmwStep::Store(call) = driver.start() else { unreachable!("merges start with a read") };
        self.merges[dc].insert(key.to_owned(), MergeSlot { driver, pending: None });
        self.store_call(dc, call, Caller::Merge { dc }, Vec::new());
    }

    // ---- owner nodes ----

    /// Live owner of `key` in `dc`.
    fn owner(&self, dc: usize, key: &str) -> Option<u32> {
        let NodeId(node) = self.tables[dc].route(key)?;
        self.nodes[dc][node as usize].node.as_ref().map(|_| node)
    }

    fn node_mut(&mut self, dc: usize, node: u32) -> &mut OwnerNode {
        self.nodes[dc][node as usize].node.as_mut().expect("live node")
    }

    fn on_node_request(&mut self, dc: usize, node: u32, req: OpRequest) {
        if self.nodes[dc][node as usize].node.is_none() {
            return;
        }
        if self.tables[dc].route(&req.key) != Some(NodeId(node)) {
            let (client, seq) = split_session(req.session);
            let hop = Span::from_ms(self.cfg.hop_ms);
            self.schedule(
                hop,
                Ev::ClientReply {
                    client,
                    seq,
                    result: OpResult::retry(FailReason::StaleOwner),
                    acquired: false,
                },
            );
            return;
        }
        let acts = self.node_mut(dc, node).on_request(req);
        self.node_actions(dc, node, acts);
    }

    fn node_actions(&mut self, dc: usize, node: u32, acts: Vec<NodeAction>) {
        for act in acts {
            match act {
                NodeAction::Store { call, ops, .. } => {
                    let incarnation = self.nodes[dc][node as usize].incarnation;
                    self.store_call(dc, call, Caller::Node { dc, node, incarnation }, ops);
                }
                NodeAction::Reply {
                    session,
                    result,
                    acquired,
                } => {
                    let (client, seq) = split_session(session);
                    let hop = Span::from_ms(self.cfg.hop_ms);
                    self.schedule(
                        hop,
                        Ev::ClientReply {
                            client,
                            seq,
                            result,
                            acquired,
                        },
                    );
                }
                NodeAction::SendTransfer { req, visible } => {
                    if req.mode == TransferMode::Sync {
                        let serial = self.node_serials.entry((dc, req.key.clone())).or_insert(0);
                        *serial += 1;
                        let serial = *serial;
                        let wait = Span::from_ms(2.0 * self.cfg.rtt_ms[dc][req.grantor.index()]);
                        let ev = Ev::NodeAcqTimeout {
                            dc,
                            key: req.key.clone(),
                            serial,
                            grantor: req.grantor,
                        };
                        self.schedule(wait, ev);
                    }
                    self.send_request(dc, req, visible, None);
                }
                NodeAction::RespondTransfer(resp) => {
                    self.metrics.transfer_msg(self.now);
                    let to = resp.requester.index();
                    self.send(dc, to, Msg::Response { resp, tag: None });
                }
                NodeAction::Propagate { to, msg } => self.send(dc, to.index(), Msg::Sync(msg)),
            }
        }
    }

    /// Hands keys to their owners after the table of `dc` changed.
    fn reconfigure(&mut self, dc: usize) {
        for node in 0..self.cfg.nodes_per_dc {
            let table = self.tables[dc].clone();
            let Some(n) = self.nodes[dc][node as usize].node.as_mut() else { continue };
            let acts = n.retain_owned(|k| table.route(k) == Some(NodeId(node)));
            self.node_actions(dc, node, acts);
        }
    }

    // ---- timers and faults ----

    fn sync_tick(&mut self) {
        for dc in 0..self.n {
            match self.cfg.strategy {
                Strategy::Weak => {
                    let reach: Vec<bool> = (0..self.n).map(|d| !self.partitioned(dc, d)).collect();
                    let pending = self.agents[dc].drain(|r| reach[r.index()]);
                    for (to, key) in pending {
                        if let Some(state) = self.stored_state(dc, &key) {
                            let msg = SyncMessage {
                                key,
                                state,
                                from: ReplicaId(dc as u32),
                            };
                            self.send(dc, to.index(), Msg::Sync(msg));
                        }
                    }
                }
                Strategy::Bcclt => {
                    let reach: Vec<bool> = (0..self.n).map(|d| !self.partitioned(dc, d)).collect();
                    let msgs = self.agents[dc].tick(&self.stores[dc], |r| reach[r.index()]);
                    for (to, msg) in msgs {
                        self.send(dc, to.index(), Msg::Sync(msg));
                    }
                }
                Strategy::Bcsrv | Strategy::BcsrvNobatch => {
                    let reach: Vec<bool> = (0..self.n).map(|d| !self.partitioned(dc, d)).collect();
                    for node in 0..self.cfg.nodes_per_dc {
                        let Some(n) = self.nodes[dc][node as usize].node.as_mut() else { continue };
                        let acts = n.propagate_tick(|r| reach[r.index()]);
                        self.node_actions(dc, node, acts);
                    }
                }
                Strategy::Strong => {}
            }
        }
        self.check_depletion_known();
        let period = Span::from_ms(self.cfg.sync_period_ms);
        if self.now + period <= self.end {
            self.schedule(period, Ev::SyncTick);
        }
    }

    fn rebalance_tick(&mut self) {
        if self.load_over {
            return;
        }
        for dc in 0..self.n {
            match self.cfg.strategy {
                Strategy::Bcclt => {
                    for key in self.keys.clone() {
                        let Some(view) = self.stores[dc].peek(&key).ok().and_then(|r| decode_record(r).ok())
                        else {
                            continue;
                        };
                        let me = ReplicaId(dc as u32);
                        for req in transfer::rebalance_requests(&key, &view, me, self.threshold) {
                            let visible = view.local_rights(req.grantor).unwrap_or(0);
                            self.send_request(dc, req, visible, None);
                        }
                    }
                }
                Strategy::Bcsrv | Strategy::BcsrvNobatch => {
                    for node in 0..self.cfg.nodes_per_dc {
                        let Some(n) = self.nodes[dc][node as usize].node.as_mut() else { continue };
                        let acts = n.rebalance_tick();
                        self.node_actions(dc, node, acts);
                    }
                }
                _ => {}
            }
        }
        let period = Span::from_ms(self.cfg.rebalance_period_ms);
        self.schedule(period, Ev::RebalanceTick);
    }

    /// The view `dc` acts on for `key`.
    fn view(&self, dc: usize, key: &str) -> Option<BoundedCounter> {
        if self.cfg.strategy.uses_owner_nodes() {
            if let Some(node) = self.owner(dc, key) {
                if let Some(w) = self.nodes[dc][node as usize].node.as_ref().and_then(|n| n.working(key)) {
                    return Some(w.clone());
                }
            }
        }
        decode_record(self.stores[dc].peek(key).ok()?).ok()
    }

    fn check_depletion_known(&mut self) {
        if !self.bounded() || self.observer.depleted_at.is_none() || self.observer.known_at.is_some() {
            return;
        }
        let known = (0..self.n).all(|dc| {
            self.keys.iter().all(|key| {
                self.view(dc, key).is_some_and(|v| {
                    v.replica_ids().all(|r| v.local_rights(r).unwrap_or(0) <= 0)
                })
            })
        });
        if known {
            self.observer.known_at = Some(self.now);
        }
    }

    fn fault_start(&mut self, i: usize) {
        match self.cfg.faults[i].clone() {
            Fault::Partition { side, .. } => self.partitions[i] = Some(side),
            Fault::Crash {
                dc,
                node,
                start_ms,
                end_ms,
            } => {
                if !self.cfg.strategy.uses_owner_nodes() {
                    return;
                }
                let slot = &mut self.nodes[dc as usize][node as usize];
                slot.node = None;
                slot.incarnation += 1;
                let detect = start_ms + self.cfg.crash_detect_ms;
                if detect < end_ms {
                    self.schedule_at(SimTime::from_ms(detect), Ev::CrashDetected(i));
                }
            }
        }
    }

    fn fault_end(&mut self, i: usize) {
        match self.cfg.faults[i].clone() {
            Fault::Partition { .. } => self.partitions[i] = None,
            Fault::Crash { dc, node, .. } => {
                if !self.cfg.strategy.uses_owner_nodes() {
                    return;
                }
                let dc = dc as usize;
                let server = self.server_config();
                let slot = &mut self.nodes[dc][node as usize];
                slot.node = Some(OwnerNode::new(ReplicaId(dc as u32), server));
                slot.incarnation += 1;
                self.tables[dc].join(NodeId(node));
                self.reconfigure(dc);
            }
        }
    }

    fn finish(mut self) -> SimOutput {
        self.metrics.extend_to(self.end);
        let strategy = self.cfg.strategy.name();
        let rows = self.metrics.rows(strategy);
        let mut report = Report {
            strategy: strategy.to_owned(),
            seed: self.cfg.seed,
            clients: self.cfg.clients,
            duration_ms: self.cfg.duration_ms,
            ..Report::default()
        };
        self.metrics.summarize(&mut report);
        report.throughput = report.succeeded as f64 / (self.cfg.duration_ms / 1000.0);
        report.depleted_at_ms = self.observer.depleted_at.map(SimTime::as_ms);
        report.depletion_known_at_ms = self.observer.known_at.map(SimTime::as_ms);
        report.converged = self.all_equal();
        report.quiescent_at_ms = self.observer.quiescent_at.as_ms();
        report.convergence_ms = match (report.converged, self.observer.equal_since) {
            (true, Some(t)) => Some(t.since(self.observer.quiescent_at).as_ms()),
            _ => None,
        };
        let home = if self.cfg.strategy == Strategy::Strong {
            self.cfg.strong_home_dc as usize
        } else {
            0
        };
        report.final_value = self
            .keys
            .iter()
            .map(|k| self.final_value(home, k))
            .sum();
        report.expected_value = self.observer.values.iter().sum();
        let known = self.observer.known_at;
        if self.cfg.op_log {
            report.ops_before_depletion = self
                .op_log
                .iter()
                .filter(|r| known.is_none_or(|t| r.start_ms < t.as_ms()))
                .count() as u64;
        } else {
            report.ops_before_depletion = report.attempted;
        }
        report.op_log = std::mem::take(&mut self.op_log);
        SimOutput { rows, report }
    }

    fn final_value(&self, dc: usize, key: &str) -> i64 {
        let Ok(record) = self.stores[dc].peek(key) else { return 0 };
        match self.cfg.strategy {
            Strategy::Weak => PnCounter::from_record(record).map_or(0, |s| s.value()),
            Strategy::Strong => i64::from_le_bytes(record.value().try_into().unwrap_or([0; 8])),
            _ => decode_record(record).map_or(0, |s| s.value()),
        }
    }
}

fn split_session(s: SessionId) -> (u32, u64) {
    ((s.0 >> 32) as u32, s.0 & 0xffff_ffff)
}

/// Whether `op` moves the counter towards its bound.
fn op_consumes(polarity: Polarity, op: CounterOp) -> bool {
    match polarity {
        Polarity::Lower => op.effect() < 0,
        Polarity::Upper => op.effect() > 0,
    }
}

/// Whether `dc`'s own entries (its row of rights and its consumption)
/// differ between two states.
fn row_differs(a: &BoundedCounter, b: &BoundedCounter, dc: usize) -> bool {
    let me = ReplicaId(dc as u32);
    a.consumed_entry(me) != b.consumed_entry(me)
        || a.replica_ids().any(|j| a.rights_entry(me, j) != b.rights_entry(me, j))
}
