//! Execution trace records, one per retired instruction and per transient
//! window, serialized as JSON lines.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::state::ExecutionDomain;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub ip: u64,
    pub opcode: String,
    pub domain: ExecutionDomain,
    pub reg_taint_after: u64,
    pub cache_set_touched: Vec<usize>,
    pub sp: u64,
    pub usp: u64,
    pub user: bool,
    /// µops executed, for transient window records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uops: Option<u64>,
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(out)
}
