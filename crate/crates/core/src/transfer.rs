//! Moving rights between replicas.
//!
//! Two mechanisms share one request/response protocol:
//!
//! * Proactive rebalancing: a replica whose rights drop below a threshold
//!   periodically sends asynchronous requests to replicas that visibly hold
//!   more, asking for half the difference. A grantor never gives away more
//!   than half of what it holds in answer to an asynchronous request.
//! * Synchronous acquisition ([`SyncAcquisition`]): an operation that lacks
//!   rights asks the visibly richest replicas in turn and waits for each
//!   reply, which carries the grantor's new state.
//!
//! Every request carries a *witness*: the requester's view of how many rights
//! the grantor has already sent it. A grantor that has sent more than that
//! ignores the request, so duplicated or replayed requests are harmless.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::crdt::{BoundedCounter, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub key: String,
    pub grantor: ReplicaId,
    pub requester: ReplicaId,
    pub amount: i64,
    /// Requester's view of `R[grantor][requester]` when the request was made.
    pub witness: i64,
    pub mode: TransferMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStatus {
    Granted,
    Denied,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferResponse {
    pub key: String,
    pub grantor: ReplicaId,
    pub requester: ReplicaId,
    pub status: TransferStatus,
    pub mode: TransferMode,
    pub granted: i64,
    /// Grantor's encoded state after the transfer, for granted synchronous
    /// requests.
    pub state: Option<Vec<u8>>,
}

impl TransferResponse {
    /// A response granting nothing.
    pub fn empty(req: &TransferRequest, status: TransferStatus) -> Self {
        TransferResponse {
            key: req.key.clone(),
            grantor: req.grantor,
            requester: req.requester,
            status,
            mode: req.mode,
            granted: 0,
            state: None,
        }
    }
}

/// Default rebalancing threshold: a tenth of an even share of the initial
/// slack, at least one right.
pub fn default_threshold(initial: i64, bound: i64, replicas: usize) -> i64 {
    let slack = (initial as i128 - bound as i128).unsigned_abs();
    let share = slack / replicas.max(1) as u128 / 10;
    share.clamp(1, i64::MAX as u128) as i64
}

/// Asynchronous requests `me` should send this period. Empty unless `me`
/// holds fewer than `threshold` rights; only replicas that visibly hold more
/// than `me` are asked, each for half the difference.
pub fn rebalance_requests(
    key: &str,
    view: &BoundedCounter,
    me: ReplicaId,
    threshold: i64,
) -> Vec<TransferRequest> {
    let Ok(mine) = view.local_rights(me) else {
        return Vec::new();
    };
    if mine >= threshold {
        return Vec::new();
    }
    view.replica_ids()
        .filter(|&r| r != me)
        .filter_map(|r| {
            let theirs = view.local_rights(r).ok()?;
            let amount = (theirs - mine) / 2;
            (amount > 0).then(|| TransferRequest {
                key: key.to_owned(),
                grantor: r,
                requester: me,
                amount,
                witness: view.rights_entry(r, me),
                mode: TransferMode::Async,
            })
        })
        .collect()
}

/// Serves `req` at the grantor, updating `state` when rights are granted.
///
/// The caller must make `state` durable before sending the response.
pub fn handle_request(state: &mut BoundedCounter, req: &TransferRequest) -> TransferResponse {
    let (grantor, requester) = (req.grantor, req.requester);
    let valid = grantor != requester
        && grantor.index() < state.replicas()
        && requester.index() < state.replicas();
    if !valid || req.amount <= 0 {
        return TransferResponse::empty(req, TransferStatus::Denied);
    }
    if state.rights_entry(grantor, requester) > req.witness {
        return TransferResponse::empty(req, TransferStatus::Ignored);
    }
    let available = state.local_rights(grantor).unwrap_or(0).max(0);
    let grantable = match req.mode {
        TransferMode::Async => req.amount.min(available / 2),
        TransferMode::Sync => req.amount.min(available),
    };
    if grantable <= 0 || state.transfer(grantor, requester, grantable).is_err() {
        return TransferResponse::empty(req, TransferStatus::Denied);
    }
    TransferResponse {
        key: req.key.clone(),
        grantor,
        requester,
        status: TransferStatus::Granted,
        mode: req.mode,
        granted: grantable,
        state: (req.mode == TransferMode::Sync).then(|| state.encode()),
    }
}

/// Next move of a [`SyncAcquisition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AcquireStep {
    /// Send this request and wait for its response or a timeout.
    Send(TransferRequest),
    /// Finished. `Some` carries the requester's view with every granted
    /// state merged in; `None` means nothing was granted.
    Done(Option<BoundedCounter>),
}

/// On-demand acquisition of the rights an operation lacks.
///
/// Candidates are the other replicas that visibly hold rights, richest first.
/// Each is asked in turn until the requester holds `needed` rights or the
/// candidates run out.
#[derive(Debug, Clone)]
pub struct SyncAcquisition {
    key: String,
    requester: ReplicaId,
    needed: i64,
    view: BoundedCounter,
    candidates: VecDeque<ReplicaId>,
    awaiting: Option<ReplicaId>,
    granted_any: bool,
}

impl SyncAcquisition {
    pub fn new(key: &str, view: BoundedCounter, requester: ReplicaId, needed: i64) -> Self {
        let mut ranked: Vec<(i64, ReplicaId)> = view
            .replica_ids()
            .filter(|&r| r != requester)
            .map(|r| (view.local_rights(r).unwrap_or(0), r))
            .filter(|&(rights, _)| rights > 0)
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        SyncAcquisition {
            key: key.to_owned(),
            requester,
            needed,
            view,
            candidates: ranked.into_iter().map(|(_, r)| r).collect(),
            awaiting: None,
            granted_any: false,
        }
    }

    pub fn requester(&self) -> ReplicaId {
        self.requester
    }

    pub fn awaiting(&self) -> Option<ReplicaId> {
        self.awaiting
    }

    pub fn view(&self) -> &BoundedCounter {
        &self.view
    }

    pub fn start(&mut self) -> AcquireStep {
        self.advance()
    }

    /// Feeds a response. Returns `None` when it does not answer the
    /// outstanding request (a late reply to a timed-out one).
    pub fn on_response(&mut self, resp: &TransferResponse) -> Option<AcquireStep> {
        if self.awaiting != Some(resp.grantor)
            || resp.requester != self.requester
            || resp.mode != TransferMode::Sync
        {
            return None;
        }
        self.awaiting = None;
        if resp.status == TransferStatus::Granted {
            if let Some(state) = resp
                .state
                .as_deref()
                .and_then(|b| BoundedCounter::decode(b).ok())
            {
                if self.view.merge(&state).is_ok() {
                    self.granted_any = true;
                }
            }
        }
        Some(self.advance())
    }

    /// The outstanding request to `grantor` timed out.
    pub fn on_timeout(&mut self, grantor: ReplicaId) -> Option<AcquireStep> {
        if self.awaiting != Some(grantor) {
            return None;
        }
        self.awaiting = None;
        Some(self.advance())
    }

    fn advance(&mut self) -> AcquireStep {
        let mine = self.view.local_rights(self.requester).unwrap_or(0);
        if mine >= self.needed {
            return AcquireStep::Done(Some(self.view.clone()));
        }
        while let Some(candidate) = self.candidates.pop_front() {
            let theirs = self.view.local_rights(candidate).unwrap_or(0);
            if theirs <= 0 {
                continue;
            }
            let deficit = self.needed - mine;
            let amount = deficit.max((theirs - mine) / 2);
            self.awaiting = Some(candidate);
            return AcquireStep::Send(TransferRequest {
                key: self.key.clone(),
                grantor: candidate,
                requester: self.requester,
                amount,
                witness: self.view.rights_entry(candidate, self.requester),
                mode: TransferMode::Sync,
            });
        }
        AcquireStep::Done(self.granted_any.then(|| self.view.clone()))
    }
}
