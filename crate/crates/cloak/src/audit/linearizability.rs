//! Linearizability checking over recorded client histories.
//!
//! A history is the client-side record: per operation, the issue and
//! response timestamps and the observed result. Addresses are independent
//! registers here, so the history is partitioned by address and each
//! partition is checked on its own. The initial value of every register
//! is the all-zero element, matching how the store is populated.
//!
//! The verdict comes from an exhaustive search over linearization orders:
//! an operation may be placed next only if no other unplaced operation
//! finished before it was issued, reads must return the value of the last
//! placed write, and visited (unplaced-set, register-value) states are
//! memoized so the search runs in practice on histories with thousands of
//! operations per address. A cheap pairwise scan runs first to name a
//! concrete violating write/read pair when one exists; the search alone
//! only knows that every ordering got stuck.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QueryKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpResult {
    /// Bytes a read returned.
    Value(#[serde(with = "crate::store::b64")] Vec<u8>),
    /// A write acknowledgment.
    Ok,
    /// The proxy rejected the operation; it never touched the register.
    Err(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientOp {
    pub id: u64,
    pub kind: QueryKind,
    pub address: u64,
    /// Payload carried by writes.
    #[serde(with = "b64opt", default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<u8>>,
    pub issue_time: u64,
    pub response_time: u64,
    pub result: OpResult,
}

pub type History = Vec<ClientOp>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail { address: u64, detail: String },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// One line of NDJSON per operation.
pub fn write_history(w: &mut impl Write, history: &History) -> Result<()> {
    for op in history {
        serde_json::to_writer(&mut *w, op)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_history(r: impl BufRead) -> Result<History> {
    let mut ops = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let op: ClientOp = serde_json::from_str(&line).map_err(|e| Error::TraceParse {
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        ops.push(op);
    }
    Ok(ops)
}

fn validate(history: &History) -> Result<()> {
    for op in history {
        if op.response_time < op.issue_time {
            return Err(Error::History(format!("op {} responded before it was issued", op.id)));
        }
        match (op.kind, &op.result) {
            (QueryKind::Read, OpResult::Value(_)) | (QueryKind::Write, OpResult::Ok) => {}
            (_, OpResult::Err(_)) => {}
            (kind, result) => {
                return Err(Error::History(format!(
                    "op {}: {kind:?} finished with mismatched result {result:?}",
                    op.id
                )));
            }
        }
        if op.kind == QueryKind::Write && op.value.is_none() && !matches!(op.result, OpResult::Err(_)) {
            return Err(Error::History(format!("write {} carries no value", op.id)));
        }
    }
    Ok(())
}

/// Register state during the search: the initial all-zero block, or the
/// interned value of the last linearized write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum State {
    Initial,
    Written(u32),
}

struct KeyOps<'a> {
    ops: Vec<&'a ClientOp>,
    /// Distinct write payloads, so states intern to small ids.
    values: Vec<&'a [u8]>,
}

impl<'a> KeyOps<'a> {
    fn value_id(&self, bytes: &[u8]) -> Option<u32> {
        self.values.iter().position(|v| *v == bytes).map(|i| i as u32)
    }

    fn read_matches(&self, op: &ClientOp, state: State) -> bool {
        let OpResult::Value(got) = &op.result else { return false };
        match state {
            State::Initial => got.iter().all(|&b| b == 0),
            State::Written(id) => got.as_slice() == self.values[id as usize],
        }
    }
}

/// The pairwise necessary condition, used to produce a nameable witness:
/// if exactly one write wholly precedes a read with no other write
/// overlapping the span between them, the read must return that write.
fn pairwise_witness(key: &KeyOps) -> Option<String> {
    for read in key.ops.iter().filter(|o| o.kind == QueryKind::Read) {
        let before: Vec<&&ClientOp> = key
            .ops
            .iter()
            .filter(|w| w.kind == QueryKind::Write && w.response_time < read.issue_time)
            .collect();
        let Some(last) = before.iter().max_by_key(|w| w.response_time) else {
            continue;
        };
        // unambiguous only if no other write could be ordered after
        // `last` yet before the read: anything not wholly before `last`
        // and issued before the read's span contests the value
        let contested = key.ops.iter().any(|w| {
            w.kind == QueryKind::Write
                && w.id != last.id
                && w.response_time > last.issue_time
                && w.issue_time < read.issue_time
        });
        if contested {
            continue;
        }
        let want = last.value.as_deref().unwrap_or_default();
        let OpResult::Value(got) = &read.result else { continue };
        if got.as_slice() != want {
            return Some(format!(
                "read {} must see write {} (most recent completed write), got different bytes",
                read.id, last.id
            ));
        }
    }
    None
}

fn key_linearizable(key: &KeyOps) -> bool {
    let n = key.ops.len();
    if n == 0 {
        return true;
    }
    let words = n.div_ceil(64);
    let mut full = vec![u64::MAX; words];
    if n % 64 != 0 {
        full[words - 1] = (1u64 << (n % 64)) - 1;
    }

    let mut visited: HashSet<(Box<[u64]>, State)> = HashSet::new();
    let mut stack: Vec<(Box<[u64]>, State)> = vec![(full.into_boxed_slice(), State::Initial)];

    while let Some((remaining, state)) = stack.pop() {
        if remaining.iter().all(|&w| w == 0) {
            return true;
        }
        if !visited.insert((remaining.clone(), state)) {
            continue;
        }
        let mut min_resp = u64::MAX;
        for i in 0..n {
            if remaining[i / 64] >> (i % 64) & 1 == 1 {
                min_resp = min_resp.min(key.ops[i].response_time);
            }
        }
        for i in 0..n {
            if remaining[i / 64] >> (i % 64) & 1 == 0 {
                continue;
            }
            let op = key.ops[i];
            // anything that finished before op was issued must go first
            if op.issue_time > min_resp {
                continue;
            }
            let next_state = match op.kind {
                QueryKind::Read => {
                    if !key.read_matches(op, state) {
                        continue;
                    }
                    state
                }
                QueryKind::Write => State::Written(
                    key.value_id(op.value.as_deref().unwrap_or_default()).expect("interned"),
                ),
            };
            let mut rest = remaining.clone();
            rest[i / 64] &= !(1u64 << (i % 64));
            stack.push((rest, next_state));
        }
    }
    false
}

fn group_by_address(history: &History) -> HashMap<u64, KeyOps<'_>> {
    let mut keys: HashMap<u64, KeyOps> = HashMap::new();
    for op in history {
        // rejected operations never reached the register
        if matches!(op.result, OpResult::Err(_)) {
            continue;
        }
        let key = keys
            .entry(op.address)
            .or_insert_with(|| KeyOps { ops: Vec::new(), values: Vec::new() });
        if op.kind == QueryKind::Write {
            let bytes = op.value.as_deref().unwrap_or_default();
            if key.value_id(bytes).is_none() {
                key.values.push(bytes);
            }
        }
        key.ops.push(op);
    }
    keys
}

/// Checks a complete history. Fails with the lowest offending address and
/// a concrete witness when the simple precedence rule already breaks.
pub fn check_linearizability(history: &History) -> Result<Verdict> {
    validate(history)?;
    let keys = group_by_address(history);
    let mut addresses: Vec<u64> = keys.keys().copied().collect();
    addresses.sort_unstable();
    for addr in addresses {
        let key = &keys[&addr];
        if !key_linearizable(key) {
            let detail = pairwise_witness(key).unwrap_or_else(|| {
                format!("no ordering of the {} operations is consistent", key.ops.len())
            });
            return Ok(Verdict::Fail { address: addr, detail });
        }
    }
    Ok(Verdict::Pass)
}

/// Independent reference: plain depth-first enumeration of linearization
/// orders with no memoization or interning, checking register semantics
/// op by op. Usable only on small per-address histories; the test suite
/// runs it against the real checker.
pub fn brute_force_check(history: &History) -> Result<bool> {
    validate(history)?;
    let keys = group_by_address(history);
    for key in keys.values() {
        let n = key.ops.len();
        let mut used = vec![false; n];
        if !brute_dfs(key, &mut used, 0, State::Initial) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn brute_dfs(key: &KeyOps, used: &mut [bool], placed: usize, state: State) -> bool {
    let n = key.ops.len();
    if placed == n {
        return true;
    }
    for i in 0..n {
        if used[i] {
            continue;
        }
        let op = key.ops[i];
        let blocked = (0..n).any(|j| {
            j != i && !used[j] && key.ops[j].response_time < op.issue_time
        });
        if blocked {
            continue;
        }
        let next_state = match op.kind {
            QueryKind::Read => {
                if !key.read_matches(op, state) {
                    continue;
                }
                state
            }
            QueryKind::Write => {
                State::Written(key.value_id(op.value.as_deref().unwrap_or_default()).expect("interned"))
            }
        };
        used[i] = true;
        if brute_dfs(key, used, placed + 1, next_state) {
            used[i] = false;
            return true;
        }
        used[i] = false;
    }
    false
}

mod b64opt {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|b| STANDARD.encode(b)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| STANDARD.decode(t).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Builds small randomized histories with controlled concurrency for
/// pitting the checker against the brute-force reference. Half the
/// histories are left valid; the rest get one read corrupted, either to
/// bytes nobody ever wrote or to a stale earlier value.
pub fn random_small_history(seed: u64, n_keys: u64, ops_per_key: usize) -> History {
    use rand::Rng;
    let mut rng = crate::crypto::seeded_rng(seed);
    let mut ops = Vec::new();
    let mut id = 0u64;
    for addr in 0..n_keys {
        // a valid sequential execution first
        let mut state = vec![0u8; 4];
        let mut t = rng.random_range(0..50u64);
        let mut prev: Vec<Vec<u8>> = vec![state.clone()];
        for _ in 0..ops_per_key {
            let issue = t;
            let resp = t + 1 + rng.random_range(0..3u64);
            t = resp + rng.random_range(0..2u64);
            if rng.random_bool(0.4) {
                let value = vec![rng.random::<u8>().max(1); 4];
                state = value.clone();
                prev.push(value.clone());
                ops.push(ClientOp {
                    id,
                    kind: QueryKind::Write,
                    address: addr,
                    value: Some(value),
                    issue_time: issue,
                    response_time: resp,
                    result: OpResult::Ok,
                });
            } else {
                ops.push(ClientOp {
                    id,
                    kind: QueryKind::Read,
                    address: addr,
                    value: None,
                    issue_time: issue,
                    response_time: resp,
                    result: OpResult::Value(state.clone()),
                });
            }
            id += 1;
        }
        // widen windows to create concurrency; the sequential order stays
        // a valid linearization, so a clean history must still pass
        for op in ops.iter_mut().rev().take(ops_per_key) {
            op.issue_time = op.issue_time.saturating_sub(rng.random_range(0..3u64));
            op.response_time += rng.random_range(0..3u64);
        }
        if rng.random_bool(0.5) {
            let reads: Vec<usize> = ops
                .iter()
                .enumerate()
                .rev()
                .take(ops_per_key)
                .filter(|(_, o)| o.kind == QueryKind::Read)
                .map(|(i, _)| i)
                .collect();
            if let Some(&pick) = reads.first() {
                let bad = if rng.random_bool(0.5) {
                    vec![0xEE; 4]
                } else {
                    prev[rng.random_range(0..prev.len())].clone()
                };
                ops[pick].result = OpResult::Value(bad);
            }
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(id: u64, addr: u64, byte: u8, issue: u64, resp: u64) -> ClientOp {
        ClientOp {
            id,
            kind: QueryKind::Write,
            address: addr,
            value: Some(vec![byte; 4]),
            issue_time: issue,
            response_time: resp,
            result: OpResult::Ok,
        }
    }

    fn r(id: u64, addr: u64, byte: u8, issue: u64, resp: u64) -> ClientOp {
        ClientOp {
            id,
            kind: QueryKind::Read,
            address: addr,
            value: None,
            issue_time: issue,
            response_time: resp,
            result: OpResult::Value(vec![byte; 4]),
        }
    }

    #[test]
    fn sequential_reads_see_the_last_write() {
        let ok = vec![w(0, 7, 1, 0, 1), r(1, 7, 1, 2, 3)];
        assert!(check_linearizability(&ok).unwrap().is_pass());

        let stale = vec![w(0, 7, 1, 0, 1), w(1, 7, 2, 2, 3), r(2, 7, 1, 4, 5)];
        let verdict = check_linearizability(&stale).unwrap();
        assert!(matches!(verdict, Verdict::Fail { address: 7, .. }), "{verdict:?}");
    }

    #[test]
    fn unwritten_registers_read_zero() {
        let ok = vec![r(0, 3, 0, 0, 1)];
        assert!(check_linearizability(&ok).unwrap().is_pass());
        let bad = vec![r(0, 3, 9, 0, 1)];
        assert!(!check_linearizability(&bad).unwrap().is_pass());
    }

    #[test]
    fn concurrent_reads_may_see_either_side_of_a_write() {
        // read overlaps the write: old value fine, new value fine
        let old = vec![w(0, 1, 5, 10, 20), r(1, 1, 0, 5, 15)];
        let new = vec![w(0, 1, 5, 10, 20), r(1, 1, 5, 5, 15)];
        assert!(check_linearizability(&old).unwrap().is_pass());
        assert!(check_linearizability(&new).unwrap().is_pass());
        // but a read wholly after the write must see it
        let late = vec![w(0, 1, 5, 10, 20), r(1, 1, 0, 21, 22)];
        assert!(!check_linearizability(&late).unwrap().is_pass());
    }

    #[test]
    fn concurrent_writes_allow_either_final_value() {
        let base = vec![w(0, 2, 1, 0, 10), w(1, 2, 2, 5, 15)];
        for last in [1u8, 2] {
            let mut h = base.clone();
            h.push(r(2, 2, last, 20, 21));
            assert!(check_linearizability(&h).unwrap().is_pass(), "final {last}");
        }
        // both sequential reads disagreeing on the order is not allowed
        let mut h = base.clone();
        h.push(r(2, 2, 1, 20, 21));
        h.push(r(3, 2, 2, 22, 23));
        assert!(!check_linearizability(&h).unwrap().is_pass());
    }

    #[test]
    fn malformed_histories_are_rejected() {
        let mut op = w(0, 0, 1, 5, 4);
        assert!(check_linearizability(&vec![op.clone()]).is_err());
        op.response_time = 6;
        op.value = None;
        assert!(check_linearizability(&vec![op.clone()]).is_err());
        let mismatched = ClientOp { result: OpResult::Ok, ..r(1, 0, 0, 0, 1) };
        assert!(check_linearizability(&vec![mismatched]).is_err());
    }

    #[test]
    fn rejected_ops_are_ignored() {
        let h = vec![
            w(0, 4, 3, 0, 1),
            ClientOp {
                id: 1,
                kind: QueryKind::Write,
                address: 4,
                value: Some(vec![9; 4]),
                issue_time: 2,
                response_time: 3,
                result: OpResult::Err(2),
            },
            r(2, 4, 3, 4, 5),
        ];
        assert!(check_linearizability(&h).unwrap().is_pass());
    }

    #[test]
    fn ndjson_round_trips() {
        let history = vec![w(0, 1, 7, 0, 2), r(1, 1, 7, 1, 3)];
        let mut buf = Vec::new();
        write_history(&mut buf, &history).unwrap();
        let back = read_history(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(history, back);
    }

    #[test]
    fn checker_agrees_with_brute_force_on_random_histories() {
        let mut fails = 0;
        for seed in 0..300u64 {
            let history = random_small_history(seed, 2, 8);
            let fast = check_linearizability(&history).unwrap().is_pass();
            let slow = brute_force_check(&history).unwrap();
            assert_eq!(fast, slow, "verdicts split on seed {seed}");
            fails += (!fast) as u32;
        }
        // the corpus must exercise both verdicts to mean anything
        assert!(fails > 50, "only {fails} failing histories generated");
        assert!(fails < 250);
    }
}
