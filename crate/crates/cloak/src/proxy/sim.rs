//! Deterministic single-threaded proxy shell driven by a tick clock.
//!
//! One tick is one batch interval: callers submit any number of queries,
//! then call [`SimProxy::end_tick`] to fire the batch and advance time.
//! The storage server shares the tick counter, so logged receive times are
//! exact interval indices and two runs with the same seeds and inputs
//! produce byte-identical logs. This is the substrate for the statistical
//! audits, where scheduler noise would only blur what is being measured.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::crypto::block_width;
use crate::error::Result;
use crate::model::{ClientResponse, Query};
use crate::net::{InProcTransport, StorageClock};
use crate::proxy::cache::LruCache;
use crate::proxy::core::{BatchOutcome, Envelope, ProxyCore};
use crate::proxy::{
    intake_decision, validate_query, IntakeCounters, IntakeDecision, ProxyConfig, ProxyMetrics,
};
use crate::store::SlotStore;

/// Whether a submitted query was taken. `Busy` hands the query back: the
/// pending-query queue is at capacity and the caller should retry after a
/// tick. In the threaded service the same condition blocks the client
/// connection instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submit {
    Accepted,
    Busy(Query),
}

pub struct SimProxy {
    core: ProxyCore,
    cache: LruCache,
    intake_counters: IntakeCounters,
    ticks: Arc<AtomicU64>,
    resp_tx: Sender<ClientResponse>,
    resp_rx: Receiver<ClientResponse>,
    max_queue: usize,
    n_elements: u64,
    element_size: usize,
    store: Arc<Mutex<SlotStore>>,
}

impl SimProxy {
    /// Builds the proxy together with its own in-process storage server.
    pub fn new(config: ProxyConfig) -> Result<Self> {
        config.validate()?;
        let width = block_width(config.element_size);
        let store = Arc::new(Mutex::new(SlotStore::new(config.schedule.capacity, width)));
        let ticks = Arc::new(AtomicU64::new(0));
        let transport = InProcTransport::new(store.clone(), StorageClock::ticks(ticks.clone()));
        let core = ProxyCore::new(&config, Box::new(transport))?;
        let (resp_tx, resp_rx) = channel();
        Ok(SimProxy {
            core,
            cache: LruCache::new(config.max_cache_capacity),
            intake_counters: IntakeCounters::default(),
            ticks,
            resp_tx,
            resp_rx,
            max_queue: config.max_queue_capacity,
            n_elements: config.n_elements,
            element_size: config.element_size,
            store,
        })
    }

    /// The storage server, for inspecting the adversary log afterwards.
    pub fn store(&self) -> Arc<Mutex<SlotStore>> {
        self.store.clone()
    }

    pub fn now(&self) -> u64 {
        self.ticks.load(Ordering::SeqCst)
    }

    pub fn pending_len(&self) -> usize {
        self.core.pending_len()
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    /// Runs intake for one query, stamping its arrival with the current
    /// tick. Anything answered on the spot (cache hits, write acks,
    /// coalescing hits, validation errors) lands in the response channel
    /// immediately; batch-served answers arrive after a later `end_tick`.
    pub fn submit(&mut self, mut query: Query) -> Submit {
        query.arrival = self.now();
        if let Some(err) = validate_query(self.n_elements, self.element_size, &query) {
            self.intake_counters.queries += 1;
            self.intake_counters.rejected += 1;
            let _ = self.resp_tx.send(err);
            return Submit::Accepted;
        }
        // every forwarded query occupies queue room unless it coalesces,
        // so gate on the pending count before intake takes any effect
        let needs_forward = match query.kind {
            crate::model::QueryKind::Read => !self.cache.contains(query.addr),
            crate::model::QueryKind::Write => true,
        };
        if needs_forward && self.core.pending_len() >= self.max_queue {
            return Submit::Busy(query);
        }
        match intake_decision(
            &mut self.cache,
            &mut self.intake_counters,
            self.n_elements,
            self.element_size,
            &query,
        ) {
            IntakeDecision::Respond(resp) => {
                let _ = self.resp_tx.send(resp);
            }
            IntakeDecision::Forward => {
                self.core.coalesce(Envelope { query, reply: self.resp_tx.clone() });
            }
            IntakeDecision::ForwardAndAck(ack) => {
                self.core.coalesce(Envelope { query, reply: self.resp_tx.clone() });
                let _ = self.resp_tx.send(ack);
            }
        }
        Submit::Accepted
    }

    /// Fires the batch for the current tick, then advances the clock.
    pub fn end_tick(&mut self) -> Result<BatchOutcome> {
        let now = self.ticks.load(Ordering::SeqCst);
        let outcome = self.core.execute_batch(now)?;
        for (addr, value) in &outcome.read_refresh {
            if !self.cache.contains(*addr) {
                self.cache.insert(*addr, value.clone());
            }
        }
        self.ticks.fetch_add(1, Ordering::SeqCst);
        Ok(outcome)
    }

    /// Everything answered since the last drain.
    pub fn drain_responses(&mut self) -> Vec<ClientResponse> {
        let mut out = Vec::new();
        while let Ok(resp) = self.resp_rx.try_recv() {
            out.push(resp);
        }
        out
    }

    pub fn metrics(&self) -> ProxyMetrics {
        ProxyMetrics {
            intake: self.intake_counters.clone(),
            batch: self.core.counters.clone(),
        }
    }

    #[doc(hidden)]
    pub fn check_invariants(&self) -> Result<()> {
        self.core.check_invariants()
    }
}
