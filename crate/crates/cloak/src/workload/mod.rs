//! Workload tooling: trace ingestion, synthetic generation, and replay.
//!
//! Traces are flat operation lists over string keys. Ingestion dictionary-
//! encodes keys into logical addresses in first-appearance order; the
//! generator produces temporally skewed traces directly over addresses.
//! Replay drives either a live proxy over TCP or the in-process simulation.

pub mod client;
pub mod gen;
pub mod replay;
pub mod trace;
