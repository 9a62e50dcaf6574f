//! Empirical verification harness: an obliviousness audit over the
//! server-observable log, the two-run indistinguishability experiment, a
//! linearizability checker over recorded client histories, and the
//! benchmark driver with its plaintext baseline.
//!
//! Everything here treats the system as a black box. The auditors consume
//! only recorded artifacts (batch logs, client histories) plus public
//! configuration, never proxy internals, so a passing verdict means the
//! property held in what an observer could actually see.

pub mod bench;
pub mod linearizability;
pub mod obliviousness;
pub mod trace_ind;

pub use bench::{run_baseline, run_benchmark, BenchConfig, BenchMode, RunMetrics};
pub use linearizability::{check_linearizability, ClientOp, History, Verdict};
pub use obliviousness::{audit_obliviousness, AuditOptions, AuditReport, CadenceSpec};
pub use trace_ind::{trace_ind_experiment, GameConfig, TraceIndReport};
