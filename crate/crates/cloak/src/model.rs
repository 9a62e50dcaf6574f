//! Domain types shared by the proxy, planner, server and audit tooling.
//!
//! The model distinguishes logical addresses (what clients name) from
//! physical addresses (slots on the storage server). The proxy owns the
//! only mapping between the two and reshuffles it on every batch, so
//! nothing outside the proxy may assume any relationship between them.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Client-visible element name, dense in `0..n_elements`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogicalAddress(pub u64);

/// Slot index on the storage server, dense in `0..capacity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysicalAddress(pub u64);

impl LogicalAddress {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl PhysicalAddress {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for LogicalAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryKind {
    Read,
    Write,
}

/// A client operation as seen by the proxy.
///
/// `arrival` is a monotonic timestamp supplied by the intake path: wall
/// nanoseconds under the real clock, the tick index under the simulated
/// clock. It feeds the recency ordering used for dummy selection and the
/// latency accounting; it never reaches the storage server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: u64,
    pub kind: QueryKind,
    pub addr: LogicalAddress,
    /// Payload for writes, exactly `element_size` bytes. Empty for reads.
    pub value: Vec<u8>,
    pub arrival: u64,
}

/// What the proxy sends back for one query id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientResponse {
    pub id: u64,
    pub body: ResponseBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseBody {
    Value(Vec<u8>),
    WriteOk,
    Err(u16),
}

impl ClientResponse {
    pub fn value(id: u64, bytes: Vec<u8>) -> Self {
        ClientResponse { id, body: ResponseBody::Value(bytes) }
    }

    pub fn write_ok(id: u64) -> Self {
        ClientResponse { id, body: ResponseBody::WriteOk }
    }

    pub fn err(id: u64, code: u16) -> Self {
        ClientResponse { id, body: ResponseBody::Err(code) }
    }
}

/// Error codes carried by the client wire protocol.
pub mod err_code {
    /// Address at or beyond the configured element count.
    pub const OUT_OF_RANGE: u16 = 1;
    /// Structurally invalid request (bad payload length, unknown kind).
    pub const MALFORMED: u16 = 2;
    /// Proxy-side failure (storage unreachable, crypto error).
    pub const INTERNAL: u16 = 3;
}

/// The public draw plan: `budgets[0]` addresses are drawn from the set
/// written back one batch ago, `budgets[1]` from two batches ago, and so
/// on. Fixed for the lifetime of a deployment and known to the adversary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub budgets: Vec<u64>,
    /// Sum of all budgets; every batch carries exactly this many elements.
    pub batch_size: u64,
    /// Total store slots addressed by the schedule: sum of budget * depth.
    pub capacity: u64,
}

impl BudgetSchedule {
    /// Validates and finalizes a budget vector. Budgets must be present,
    /// positive and non-increasing with depth.
    pub fn new(budgets: Vec<u64>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::InvalidSchedule("no budgets".into()));
        }
        if budgets.iter().any(|&b| b == 0) {
            return Err(Error::InvalidSchedule("zero budget".into()));
        }
        if budgets.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidSchedule(
                "budgets must be non-increasing with set depth".into(),
            ));
        }
        let batch_size = budgets.iter().sum();
        let capacity = total_capacity(&budgets)?;
        Ok(BudgetSchedule { budgets, batch_size, capacity })
    }

    /// Number of reuse-distance sets, `T`.
    pub fn max_set_index(&self) -> usize {
        self.budgets.len()
    }

    /// Budget for the 1-indexed set `t`.
    pub fn budget_at(&self, t: usize) -> Result<u64> {
        let max = self.budgets.len();
        if t == 0 || t > max {
            return Err(Error::SetIndexOutOfRange { index: t, max });
        }
        Ok(self.budgets[t - 1])
    }

    /// Steady-state size of the 1-indexed set `t` just before a batch is
    /// formed: everything the sets deeper than `t-1` still hold.
    pub fn set_size_at(&self, t: usize) -> Result<u64> {
        set_size_at(&self.budgets, t)
    }
}

/// Steady-state size of set `t` (1-indexed): the suffix sum of budgets
/// from depth `t`. Set 1 always has full batch size; the deepest set holds
/// exactly its own budget and empties on every draw.
pub fn set_size_at(budgets: &[u64], t: usize) -> Result<u64> {
    let max = budgets.len();
    if t == 0 || t > max {
        return Err(Error::SetIndexOutOfRange { index: t, max });
    }
    Ok(budgets[t - 1..].iter().sum())
}

/// Store capacity implied by a budget vector: each budget `a_t` sustains a
/// set of lifetime `t` batches, so it accounts for `a_t * t` slots.
pub fn total_capacity(budgets: &[u64]) -> Result<u64> {
    if budgets.is_empty() {
        return Err(Error::InvalidSchedule("no budgets".into()));
    }
    Ok(budgets
        .iter()
        .enumerate()
        .map(|(i, &b)| b * (i as u64 + 1))
        .sum())
}

/// Per-element proxy state, one row of the position map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionMapEntry {
    pub logical: LogicalAddress,
    pub physical: PhysicalAddress,
    /// Batch in which this element was last written back (or its seeded
    /// value from init, which is indistinguishable to the rest of the
    /// proxy from a real inclusion).
    pub last_batch_id: u64,
    /// Monotonic timestamp of the last client query naming this address.
    /// `None` for addresses no client has ever asked for.
    pub last_client_access: Option<u64>,
}

/// Number of batches since the entry was last included, clamped to the
/// deepest set index. In a healthy proxy the clamp never fires; it guards
/// the set lookup against arithmetic drift.
pub fn reuse_distance(entry: &PositionMapEntry, cur_batch_id: u64, max_set_index: usize) -> usize {
    debug_assert!(entry.last_batch_id <= cur_batch_id);
    let d = cur_batch_id.saturating_sub(entry.last_batch_id) as usize;
    d.min(max_set_index)
}

/// Bijection between logical and physical addresses plus the per-element
/// bookkeeping the batching logic needs. Both directions are dense arrays;
/// the store capacity is small enough that sparse maps would only add
/// overhead.
#[derive(Debug, Clone)]
pub struct PositionMap {
    forward: Vec<u64>,
    reverse: Vec<u64>,
    last_batch_id: Vec<u64>,
    last_client_access: Vec<Option<u64>>,
}

impl PositionMap {
    /// Builds the map from an initial assignment `forward[logical] = physical`,
    /// which must be a permutation of `0..len`.
    pub fn new(forward: Vec<u64>, last_batch_id: Vec<u64>) -> Result<Self> {
        let n = forward.len();
        assert_eq!(last_batch_id.len(), n);
        let mut reverse = vec![u64::MAX; n];
        for (logical, &phys) in forward.iter().enumerate() {
            if phys as usize >= n {
                return Err(Error::AddressOutOfRange { addr: phys, capacity: n as u64 });
            }
            if reverse[phys as usize] != u64::MAX {
                return Err(Error::DuplicateAddress(phys));
            }
            reverse[phys as usize] = logical as u64;
        }
        Ok(PositionMap {
            forward,
            reverse,
            last_batch_id,
            last_client_access: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn physical(&self, logical: LogicalAddress) -> PhysicalAddress {
        PhysicalAddress(self.forward[logical.idx()])
    }

    pub fn logical(&self, physical: PhysicalAddress) -> LogicalAddress {
        LogicalAddress(self.reverse[physical.idx()])
    }

    pub fn entry(&self, logical: LogicalAddress) -> PositionMapEntry {
        let i = logical.idx();
        PositionMapEntry {
            logical,
            physical: PhysicalAddress(self.forward[i]),
            last_batch_id: self.last_batch_id[i],
            last_client_access: self.last_client_access[i],
        }
    }

    /// Reassigns an element to a new slot after a batch write-back.
    pub fn relocate(&mut self, logical: LogicalAddress, physical: PhysicalAddress, batch_id: u64) {
        let i = logical.idx();
        self.forward[i] = physical.0;
        self.reverse[physical.idx()] = logical.0;
        self.last_batch_id[i] = batch_id;
    }

    /// Records a client query against the address (recency input for
    /// dummy selection).
    pub fn touch(&mut self, logical: LogicalAddress, at: u64) {
        self.last_client_access[logical.idx()] = Some(at);
    }

    /// Checks that forward and reverse stay inverse permutations of each
    /// other. Used by tests and debug assertions, not on the hot path.
    pub fn is_bijection(&self) -> bool {
        self.forward
            .iter()
            .enumerate()
            .all(|(l, &p)| (p as usize) < self.reverse.len() && self.reverse[p as usize] == l as u64)
    }
}

/// One reuse-distance set together with the FIFO of pending real queries
/// that target it. The queue ages with its set: a query enqueued while the
/// address sat at distance `d` stays attached as the set deepens, so no
/// address ever waits in more than one queue.
#[derive(Debug, Clone, Default)]
pub struct SetBucket {
    pub members: BTreeSet<LogicalAddress>,
    pub queue: VecDeque<LogicalAddress>,
}

impl SetBucket {
    pub fn with_members(members: BTreeSet<LogicalAddress>) -> Self {
        SetBucket { members, queue: VecDeque::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty() && self.queue.is_empty()
    }
}

/// The live reuse-distance sets, front = most recently written batch.
///
/// `buckets[d]` holds the addresses at raw distance `d` from the current
/// batch id. Slot `T` exists only as a guard: draws empty the deepest
/// populated set exactly when it reaches the back, so in a healthy run the
/// final bucket is always vacant when it is retired.
#[derive(Debug, Clone)]
pub struct ReuseDistanceState {
    buckets: VecDeque<SetBucket>,
    pub cur_batch_id: u64,
}

impl ReuseDistanceState {
    pub fn new(max_set_index: usize, cur_batch_id: u64) -> Self {
        assert!(max_set_index >= 1);
        let mut buckets = VecDeque::with_capacity(max_set_index + 1);
        for _ in 0..=max_set_index {
            buckets.push_back(SetBucket::default());
        }
        ReuseDistanceState { buckets, cur_batch_id }
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, distance: usize) -> &SetBucket {
        &self.buckets[distance]
    }

    pub fn bucket_mut(&mut self, distance: usize) -> &mut SetBucket {
        &mut self.buckets[distance]
    }

    /// Installs the just-written batch as the new distance-0 set and
    /// retires the deepest bucket, which must already be drained.
    pub fn rotate(&mut self, fresh: SetBucket) {
        let husk = self.buckets.pop_back().expect("bucket ring never empty");
        debug_assert!(
            husk.is_empty(),
            "retiring a non-empty reuse-distance set (members={}, queued={})",
            husk.members.len(),
            husk.queue.len()
        );
        self.buckets.push_front(fresh);
        self.cur_batch_id += 1;
    }

    /// Member count per distance, shallow to deep.
    pub fn sizes(&self) -> Vec<u64> {
        self.buckets.iter().map(|b| b.members.len() as u64).collect()
    }

    pub fn total_members(&self) -> u64 {
        self.buckets.iter().map(|b| b.members.len() as u64).sum()
    }

    pub fn total_queued(&self) -> usize {
        self.buckets.iter().map(|b| b.queue.len()).sum()
    }
}
