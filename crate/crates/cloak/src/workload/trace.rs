//! External trace ingestion.
//!
//! Traces arrive as CSV with a header and rows of `seq,key[,kind]`. Keys
//! are arbitrary strings; they are dictionary-encoded into dense logical
//! addresses in order of first appearance, so the planner and replay see
//! exactly the address space the trace actually touches. Write payloads
//! are derived from a keyed hash of the key and sequence number: stable
//! across runs, distinct across writes, and impossible to confuse with
//! zero-initialized storage.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LogicalAddress, QueryKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOp {
    pub seq: u64,
    pub addr: LogicalAddress,
    pub kind: QueryKind,
}

#[derive(Debug, Clone)]
pub struct IngestedTrace {
    pub ops: Vec<TraceOp>,
    /// Key strings by logical address, in first-appearance order.
    pub keys: Vec<String>,
}

impl IngestedTrace {
    pub fn distinct(&self) -> u64 {
        self.keys.len() as u64
    }

    pub fn addresses(&self) -> Vec<LogicalAddress> {
        self.ops.iter().map(|op| op.addr).collect()
    }
}

/// Deterministic payload for a write op, stretched to the element size.
pub fn write_payload(key: &str, seq: u64, element_size: usize) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(b"cloak-trace-payload");
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update(seq.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().copied().cycle().take(element_size).collect()
}

pub fn ingest_csv_trace_file(path: &Path) -> Result<IngestedTrace> {
    let file = std::fs::File::open(path)?;
    ingest_csv_trace(file)
}

/// Parses a CSV trace. Structural problems (missing fields, bad numbers,
/// unknown kinds, duplicate sequence breaks) are reported with the line
/// they occur on; an empty trace is an error because every consumer would
/// just trip over it later.
pub fn ingest_csv_trace(reader: impl Read) -> Result<IngestedTrace> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut ops = Vec::new();
    let mut keys: Vec<String> = Vec::new();
    let mut dict: HashMap<String, LogicalAddress> = HashMap::new();
    for record in csv_reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::TraceParse { line, msg: format!("unreadable row: {e}") }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |msg: String| Error::TraceParse { line, msg };
        if record.len() < 2 || record.len() > 3 {
            return Err(parse(format!("expected seq,key[,kind], got {} fields", record.len())));
        }
        let seq: u64 = record[0]
            .parse()
            .map_err(|e| parse(format!("bad sequence number {:?}: {e}", &record[0])))?;
        let key = record[1].to_string();
        if key.is_empty() {
            return Err(parse("empty key".into()));
        }
        let kind = match record.get(2) {
            None | Some("") | Some("R") | Some("r") => QueryKind::Read,
            Some("W") | Some("w") => QueryKind::Write,
            Some(other) => return Err(parse(format!("unknown kind {other:?}"))),
        };
        let addr = *dict.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            LogicalAddress(keys.len() as u64 - 1)
        });
        ops.push(TraceOp { seq, addr, kind });
    }
    if ops.is_empty() {
        return Err(Error::TraceParse { line: 0, msg: "trace has no rows".into() });
    }
    Ok(IngestedTrace { ops, keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<IngestedTrace> {
        ingest_csv_trace(text.as_bytes())
    }

    #[test]
    fn dictionary_encodes_in_first_appearance_order() {
        let trace = ingest("seq,key,kind\n1,users/42,R\n2,users/7,W\n3,users/42,R\n").unwrap();
        assert_eq!(trace.distinct(), 2);
        assert_eq!(trace.keys, vec!["users/42".to_string(), "users/7".to_string()]);
        assert_eq!(
            trace.ops,
            vec![
                TraceOp { seq: 1, addr: LogicalAddress(0), kind: QueryKind::Read },
                TraceOp { seq: 2, addr: LogicalAddress(1), kind: QueryKind::Write },
                TraceOp { seq: 3, addr: LogicalAddress(0), kind: QueryKind::Read },
            ]
        );
    }

    #[test]
    fn kind_column_is_optional() {
        let trace = ingest("seq,key\n10,a\n11,b\n").unwrap();
        assert!(trace.ops.iter().all(|op| op.kind == QueryKind::Read));
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = ingest("seq,key,kind\n1,a,R\nnope,b,R\n").unwrap_err();
        match err {
            Error::TraceParse { line, .. } => assert_eq!(line, 3),
            other => panic!("wrong error {other:?}"),
        }
        let err = ingest("seq,key,kind\n1,a,R\n2,b,X\n").unwrap_err();
        match err {
            Error::TraceParse { line, .. } => assert_eq!(line, 3),
            other => panic!("wrong error {other:?}"),
        }
        let err = ingest("seq,key,kind\n1,,R\n").unwrap_err();
        assert!(matches!(err, Error::TraceParse { line: 2, .. }));
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(ingest("seq,key,kind\n"), Err(Error::TraceParse { .. })));
        assert!(matches!(ingest(""), Err(Error::TraceParse { .. })));
    }

    #[test]
    fn payloads_are_stable_distinct_and_sized() {
        let a = write_payload("k", 1, 64);
        let b = write_payload("k", 1, 64);
        let c = write_payload("k", 2, 64);
        let d = write_payload("other", 1, 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a.len(), 64);
        assert_eq!(write_payload("k", 1, 7).len(), 7);
        assert_ne!(a, vec![0u8; 64]);
    }
}
