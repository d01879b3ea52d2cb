//! Bounded Counter: an invariant-preserving replicated counter and the
//! machinery around it.
//!
//! * [`crdt`]: the counter itself (lower, upper and range variants).
//! * [`store`]: an in-process, Dynamo-style key-value store per data center.
//! * [`client`]: the client-side middleware (read, update, conditional write).
//! * [`server`]: the server-side middleware (owner routing, cache, batching).
//! * [`transfer`]: rights rebalancing and synchronous acquisition.
//! * [`sim`]: a deterministic discrete-event simulator of several data centers.
//! * [`checker`]: exhaustive small-model exploration of counter executions.

pub mod api;
pub mod checker;
pub mod client;
pub mod crdt;
pub mod server;
pub mod sim;
pub mod store;
pub mod time;
pub mod transfer;

pub use api::{CounterOp, FailReason, OpFlag, OpKind, OpResult, OpStatus};
pub use crdt::{BoundedCounter, CounterError, Polarity, RangeCounter, ReplicaId};
pub use store::{Consistency, Store, StoreError, Version, VersionedRecord};
pub use time::{SimTime, Span};
