//! An oblivious key-value store built around a trusted batching proxy.
//!
//! Clients talk to a proxy they trust; the proxy talks to a storage server
//! nobody trusts. The proxy hides which elements clients touch by sending
//! the server a fixed-size batch of encrypted reads and writes on a fixed
//! cadence, padding with dummy accesses, and reshuffling where elements
//! live on every write-back. What the server observes, batch after batch,
//! is statistically independent of what clients asked for.

pub mod audit;
pub mod error;
pub mod model;
pub mod planner;
pub mod crypto;
pub mod net;
pub mod proxy;
pub mod stats;
pub mod store;
pub mod wire;
pub mod workload;

pub use error::{Error, Result};
