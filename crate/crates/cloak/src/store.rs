//! Storage server core: a flat array of fixed-width encrypted slots plus
//! the adversary-visible access log.
//!
//! The store is deliberately dumb. It holds opaque blocks, answers batch
//! reads, applies batch writes, and records everything it saw. The log is
//! the observation channel for the obliviousness audit, so entries capture
//! exactly what a compromised server would learn: arrival time, the slots
//! read, and the slots written together with the new ciphertexts.
//!
//! The protocol alternates strictly: one batch read, then one batch write.
//! Retransmits are recognized structurally rather than by sequence number.
//! A repeated read with the address list of the in-flight batch replays
//! the cached response. A read matching the most recently completed batch
//! is ambiguous (retried exchange, or a fresh batch that happens to draw
//! the same slots), so it is served current contents and classified by
//! its write half: byte-identical to the previous write means replay and
//! is acknowledged without touching the log, anything else is a fresh
//! batch. Write-backs carry freshly encrypted blocks, so distinct batches
//! never produce identical write bytes in practice. This keeps a retried
//! exchange from showing up twice in the adversary's view.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed batch exchange as the server saw it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLogEntry {
    pub batch_index: u64,
    /// Arrival timestamp of the batch read, in whatever unit the caller's
    /// clock uses (microseconds for the TCP server, ticks in simulation).
    pub receive_time: u64,
    pub read_addresses: Vec<u64>,
    pub written: Vec<WrittenBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrittenBlock {
    pub addr: u64,
    #[serde(with = "b64")]
    pub block: Vec<u8>,
}

/// What a batch write did, so callers can decide whether to log it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Applied,
    /// Byte-identical retransmit of the previous write; nothing changed.
    ReplayedIdempotent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    /// Waiting for the setup upload that populates every slot.
    AwaitInit,
    Idle,
    AwaitWrite,
    /// The read half matched the previous batch; whether this is a replay
    /// or a fresh batch is decided when the write half arrives.
    MaybeReplay,
}

struct PendingBatch {
    receive_time: u64,
    read_addresses: Vec<u64>,
    response: Vec<Vec<u8>>,
}

struct CompletedBatch {
    read_addresses: Vec<u64>,
    writes: Vec<(u64, Vec<u8>)>,
}

pub struct SlotStore {
    slots: Vec<Vec<u8>>,
    block_width: usize,
    phase: Phase,
    pending: Option<PendingBatch>,
    last: Option<CompletedBatch>,
    log: VecDeque<BatchLogEntry>,
    log_limit: usize,
    next_batch_index: u64,
}

impl SlotStore {
    /// An empty store that will accept nothing but the setup upload.
    pub fn new(capacity: u64, block_width: usize) -> Self {
        SlotStore {
            slots: vec![vec![0u8; block_width]; capacity as usize],
            block_width,
            phase: Phase::AwaitInit,
            pending: None,
            last: None,
            log: VecDeque::new(),
            log_limit: usize::MAX,
            next_batch_index: 0,
        }
    }

    /// A store already populated with blocks, ready for batches. Used when
    /// server and proxy live in the same process and the setup upload would
    /// be a pointless copy.
    pub fn from_blocks(blocks: Vec<Vec<u8>>, block_width: usize) -> Result<Self> {
        for b in &blocks {
            check_width(b, block_width)?;
        }
        let mut store = SlotStore::new(blocks.len() as u64, block_width);
        store.slots = blocks;
        store.phase = Phase::Idle;
        Ok(store)
    }

    /// Cap the in-memory log at `limit` entries, dropping the oldest.
    pub fn with_log_limit(mut self, limit: usize) -> Self {
        self.log_limit = limit.max(1);
        self.trim_log();
        self
    }

    pub fn capacity(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn block_width(&self) -> usize {
        self.block_width
    }

    pub fn is_initialized(&self) -> bool {
        self.phase != Phase::AwaitInit
    }

    pub fn slot(&self, addr: u64) -> Result<&[u8]> {
        self.slots
            .get(addr as usize)
            .map(|b| b.as_slice())
            .ok_or(Error::AddressOutOfRange { addr, capacity: self.capacity() })
    }

    /// The setup upload. Must cover every slot exactly once. Setup happens
    /// before the adversary starts watching, so it is not logged.
    pub fn init_upload(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        if self.phase != Phase::AwaitInit {
            return Err(Error::Protocol("setup upload on an initialized store".into()));
        }
        if writes.len() as u64 != self.capacity() {
            return Err(Error::Protocol(format!(
                "setup upload has {} blocks, store holds {}",
                writes.len(),
                self.capacity()
            )));
        }
        self.check_writes(writes)?;
        let mut seen = vec![false; self.slots.len()];
        for (addr, _) in writes {
            if seen[*addr as usize] {
                return Err(Error::DuplicateAddress(*addr));
            }
            seen[*addr as usize] = true;
        }
        for (addr, block) in writes {
            self.slots[*addr as usize] = block.clone();
        }
        self.phase = Phase::Idle;
        Ok(())
    }

    pub fn batch_read(&mut self, addrs: &[u64], receive_time: u64) -> Result<Vec<Vec<u8>>> {
        match self.phase {
            Phase::AwaitInit => {
                return Err(Error::Protocol("batch read before setup upload".into()));
            }
            Phase::AwaitWrite | Phase::MaybeReplay => {
                // Only a retransmit of the in-flight read is acceptable here.
                let pending = self.pending.as_ref().expect("awaiting write implies pending");
                if addrs == pending.read_addresses.as_slice() {
                    return Ok(pending.response.clone());
                }
                return Err(Error::Protocol("new batch read while a write is outstanding".into()));
            }
            Phase::Idle => {}
        }
        if addrs.is_empty() {
            return Err(Error::Protocol("empty batch read".into()));
        }
        self.check_distinct_in_range(addrs)?;
        let response: Vec<Vec<u8>> =
            addrs.iter().map(|a| self.slots[*a as usize].clone()).collect();
        let ambiguous = self
            .last
            .as_ref()
            .is_some_and(|last| addrs == last.read_addresses.as_slice());
        self.pending = Some(PendingBatch {
            receive_time,
            read_addresses: addrs.to_vec(),
            response: response.clone(),
        });
        self.phase = if ambiguous { Phase::MaybeReplay } else { Phase::AwaitWrite };
        Ok(response)
    }

    pub fn batch_write(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<WriteOutcome> {
        match self.phase {
            Phase::AwaitInit => Err(Error::Protocol("batch write before setup upload".into())),
            Phase::Idle => {
                // Allowed only as a retransmit of the previous write whose
                // acknowledgment was lost.
                match &self.last {
                    Some(last) if writes == last.writes.as_slice() => {
                        Ok(WriteOutcome::ReplayedIdempotent)
                    }
                    _ => Err(Error::Protocol("batch write without a preceding read".into())),
                }
            }
            Phase::MaybeReplay => {
                let last = self.last.as_ref().expect("ambiguous phase implies a completed batch");
                if writes == last.writes.as_slice() {
                    // The previous exchange was retried end to end; its
                    // effects are already in place.
                    self.pending = None;
                    self.phase = Phase::Idle;
                    return Ok(WriteOutcome::ReplayedIdempotent);
                }
                // A fresh batch that happened to read the same slot list.
                self.apply_fresh_write(writes)
            }
            Phase::AwaitWrite => self.apply_fresh_write(writes),
        }
    }

    fn apply_fresh_write(&mut self, writes: &[(u64, Vec<u8>)]) -> Result<WriteOutcome> {
        self.check_writes(writes)?;
        self.check_distinct_in_range(&writes.iter().map(|(a, _)| *a).collect::<Vec<_>>())?;
        let pending = self.pending.take().expect("write phase implies pending");
        for (addr, block) in writes {
            self.slots[*addr as usize] = block.clone();
        }
        self.log.push_back(BatchLogEntry {
            batch_index: self.next_batch_index,
            receive_time: pending.receive_time,
            read_addresses: pending.read_addresses.clone(),
            written: writes
                .iter()
                .map(|(addr, block)| WrittenBlock { addr: *addr, block: block.clone() })
                .collect(),
        });
        self.next_batch_index += 1;
        self.trim_log();
        self.last = Some(CompletedBatch {
            read_addresses: pending.read_addresses,
            writes: writes.to_vec(),
        });
        self.phase = Phase::Idle;
        Ok(WriteOutcome::Applied)
    }

    pub fn log(&self) -> &VecDeque<BatchLogEntry> {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<BatchLogEntry> {
        self.log.drain(..).collect()
    }

    /// Newest completed entry, for incremental log sinks.
    pub fn latest_entry(&self) -> Option<&BatchLogEntry> {
        self.log.back()
    }

    pub fn flush_ndjson(&self, w: &mut impl Write) -> Result<()> {
        for entry in &self.log {
            write_ndjson_entry(w, entry)?;
        }
        Ok(())
    }

    fn trim_log(&mut self) {
        while self.log.len() > self.log_limit {
            self.log.pop_front();
        }
    }

    fn check_writes(&self, writes: &[(u64, Vec<u8>)]) -> Result<()> {
        if writes.is_empty() {
            return Err(Error::Protocol("empty batch write".into()));
        }
        for (_, block) in writes {
            check_width(block, self.block_width)?;
        }
        Ok(())
    }

    fn check_distinct_in_range(&self, addrs: &[u64]) -> Result<()> {
        let capacity = self.capacity();
        let mut sorted: Vec<u64> = addrs.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::DuplicateAddress(pair[0]));
            }
        }
        for &addr in addrs {
            if addr >= capacity {
                return Err(Error::AddressOutOfRange { addr, capacity });
            }
        }
        Ok(())
    }
}

pub fn write_ndjson_entry(w: &mut impl Write, entry: &BatchLogEntry) -> Result<()> {
    serde_json::to_writer(&mut *w, entry)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_ndjson_log(r: impl BufRead) -> Result<Vec<BatchLogEntry>> {
    let mut entries = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: BatchLogEntry = serde_json::from_str(&line).map_err(|e| Error::TraceParse {
            line: i as u64 + 1,
            msg: format!("bad log entry: {e}"),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn check_width(block: &[u8], want: usize) -> Result<()> {
    if block.len() != want {
        return Err(Error::WidthMismatch { expected: want, got: block.len() });
    }
    Ok(())
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        STANDARD.encode(bytes).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}
