//! The trusted proxy: intake, batching, and the two front ends.
//!
//! Intake handles each client query the moment it arrives: cache hits and
//! write acknowledgments are answered immediately, everything else is
//! forwarded to the batching layer. The batching layer coalesces pending
//! queries per address and, on a fixed cadence, emits a batch whose size
//! and composition are fixed by the budget schedule regardless of what
//! clients are doing. `sim` drives that machinery on a deterministic tick
//! clock; `service` runs it on threads and wall time.

pub mod cache;
pub mod core;
pub mod service;
pub mod sim;

use std::time::Duration;

use serde::Serialize;

use crate::crypto::KEY_LEN;
use crate::error::{Error, Result};
use crate::model::{err_code, BudgetSchedule, ClientResponse, Query, QueryKind};
use cache::LruCache;

/// Deliberate protocol defects for the audit tooling to catch. A proxy
/// built with a mutation must be observably different from a healthy one,
/// otherwise the audit has no teeth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Send only the real pending queries, never padding batches up to
    /// their fixed composition.
    SkipDummyFill,
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    /// Client-visible address space, `0..n_elements`. May be smaller than
    /// the schedule's capacity; the excess addresses exist only to keep
    /// set sizes exact and are never handed to clients.
    pub n_elements: u64,
    pub schedule: BudgetSchedule,
    pub element_size: usize,
    pub max_cache_capacity: usize,
    /// Bound on distinct addresses with pending queries. When reached, the
    /// batching layer stops draining intake until a batch frees room.
    pub max_queue_capacity: usize,
    /// Batch cadence under the wall clock. Ignored by the tick-driven
    /// simulation, which fires a batch per tick.
    pub batch_interval: Duration,
    pub key: [u8; KEY_LEN],
    /// Deterministic seeding for experiments. Deployments leave this unset
    /// and draw from the operating system.
    pub seed: Option<u64>,
    pub mutation: Option<Mutation>,
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_elements == 0 {
            return Err(Error::Config("need at least one element".into()));
        }
        if self.n_elements > self.schedule.capacity {
            return Err(Error::Config(format!(
                "{} elements exceed schedule capacity {}",
                self.n_elements, self.schedule.capacity
            )));
        }
        if self.element_size == 0 {
            return Err(Error::Config("element size must be positive".into()));
        }
        if self.max_queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        if self.mutation.is_some() && self.schedule.max_set_index() < 2 {
            return Err(Error::Config("mutations need at least two sets".into()));
        }
        Ok(())
    }
}

/// Counters owned by the intake side.
#[derive(Debug, Default, Clone, Serialize)]
pub struct IntakeCounters {
    pub queries: u64,
    pub cache_hits: u64,
    pub reads_forwarded: u64,
    pub writes_forwarded: u64,
    pub rejected: u64,
}

/// Counters owned by the batching side.
#[derive(Debug, Default, Clone, Serialize)]
pub struct BatchCounters {
    pub batches: u64,
    pub real_slots: u64,
    pub dummy_slots: u64,
    pub reads_coalesced: u64,
    pub reads_answered_from_buffered_write: u64,
    pub write_values_replaced: u64,
    pub read_responses: u64,
    /// Total time batch-answered reads spent queued, in arrival-stamp
    /// units (microseconds wall, ticks simulated). Reads answered at
    /// intake from a buffered write contribute zero.
    pub read_wait_sum: u64,
    pub backpressure_waits: u64,
}

/// Combined snapshot for reporting.
#[derive(Debug, Default, Clone, Serialize)]
pub struct ProxyMetrics {
    pub intake: IntakeCounters,
    pub batch: BatchCounters,
}

impl ProxyMetrics {
    /// Mean queue wait of answered reads, in arrival-stamp units. Reads
    /// served from a buffered write count as zero wait; cache hits never
    /// reach the batching layer and are excluded.
    pub fn mean_read_wait(&self) -> f64 {
        if self.batch.read_responses == 0 {
            return 0.0;
        }
        self.batch.read_wait_sum as f64 / self.batch.read_responses as f64
    }

    /// Fraction of batch slots that carried a real pending query.
    pub fn utilization(&self) -> f64 {
        let total = self.batch.real_slots + self.batch.dummy_slots;
        if total == 0 {
            0.0
        } else {
            self.batch.real_slots as f64 / total as f64
        }
    }

    /// Slot conservation: every forwarded query either merges into an
    /// existing pending entry or eventually occupies one real slot. Zero
    /// once the queue has drained; useful as an accounting cross-check.
    pub fn conservation_gap(&self) -> i64 {
        let forwarded = self.intake.reads_forwarded + self.intake.writes_forwarded;
        let merged = self.batch.reads_coalesced
            + self.batch.reads_answered_from_buffered_write
            + self.batch.write_values_replaced;
        forwarded as i64 - merged as i64 - self.batch.real_slots as i64
    }
}

/// What intake decided for one query. The caller is responsible for
/// carrying out the decision atomically with respect to other intakes of
/// the same address: the cache mutation inside and the forward must not
/// interleave with another query's, or the cache and the buffered write
/// queue can disagree about the latest value.
#[derive(Debug)]
pub enum IntakeDecision {
    /// Answered on the spot; nothing is forwarded.
    Respond(ClientResponse),
    /// Read miss: forward and answer later from the batch.
    Forward,
    /// Write: forward, and acknowledge now. The durable effect is the
    /// buffered value, which the batching layer owns from here on.
    ForwardAndAck(ClientResponse),
}

/// Structural validation shared by both front ends. Returns the error
/// response to send, if any.
pub fn validate_query(n_elements: u64, element_size: usize, query: &Query) -> Option<ClientResponse> {
    if query.addr.0 >= n_elements {
        return Some(ClientResponse::err(query.id, err_code::OUT_OF_RANGE));
    }
    if query.kind == QueryKind::Write && query.value.len() != element_size {
        return Some(ClientResponse::err(query.id, err_code::MALFORMED));
    }
    None
}

/// Algorithm run on every arriving query, before anything touches the
/// batching layer.
pub fn intake_decision(
    cache: &mut LruCache,
    counters: &mut IntakeCounters,
    n_elements: u64,
    element_size: usize,
    query: &Query,
) -> IntakeDecision {
    counters.queries += 1;
    if let Some(err) = validate_query(n_elements, element_size, query) {
        counters.rejected += 1;
        return IntakeDecision::Respond(err);
    }
    match query.kind {
        QueryKind::Read => {
            if let Some(value) = cache.get(query.addr) {
                counters.cache_hits += 1;
                IntakeDecision::Respond(ClientResponse::value(query.id, value.to_vec()))
            } else {
                counters.reads_forwarded += 1;
                IntakeDecision::Forward
            }
        }
        QueryKind::Write => {
            cache.insert(query.addr, query.value.clone());
            counters.writes_forwarded += 1;
            IntakeDecision::ForwardAndAck(ClientResponse::write_ok(query.id))
        }
    }
}
