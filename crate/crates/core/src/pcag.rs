//! Partition count aggregation.
//!
//! Every cycle each partition with at least one active event appends an
//! intermediate count result `total|new|t`. A probe over `[ts, te]` counts
//! `Total(ts) + sum(New(ts+1..=te))` per partition, then sums across
//! partitions. A partition with no entry at some cycle had no active events
//! then, so a missing entry reads as zero.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{Cycle, TimeInterval};
use crate::epgrid::Pid;
use crate::error::{QueryError, StoreError};
use crate::keys;
use crate::storage::{KvBackend, WriteOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Icr {
    pub pid: Pid,
    pub t: Cycle,
    pub total: u32,
    pub new: u32,
}

impl Icr {
    pub fn encode(&self) -> String {
        format!("{}|{}|{}", self.total, self.new, self.t)
    }

    pub fn decode(pid: Pid, bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |why: &str| StoreError::Corrupt {
            key: keys::icr_key(pid),
            why: why.to_string(),
        };
        let text = std::str::from_utf8(bytes).map_err(|_| corrupt("non-utf8 count"))?;
        let mut parts = text.split('|');
        let mut field = |name: &str| -> Result<u64, StoreError> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt(&format!("bad {name} in {text:?}")))
        };
        let total = field("total")?;
        let new = field("new")?;
        let t = field("t")?;
        if new > total {
            return Err(corrupt("new exceeds total"));
        }
        Ok(Icr {
            pid,
            t,
            total: total as u32,
            new: new as u32,
        })
    }

    pub fn op(&self) -> WriteOp {
        WriteOp::append(keys::icr_key(self.pid), self.encode())
    }
}

/// Count results for cycle `t` from the events active at `t`, each given
/// as `(partition, stime)`. Partitions without active events emit nothing.
pub fn emit_icrs(t: Cycle, active: impl IntoIterator<Item = (Pid, Cycle)>) -> Vec<Icr> {
    let mut counts: BTreeMap<Pid, (u32, u32)> = BTreeMap::new();
    for (pid, stime) in active {
        let entry = counts.entry(pid).or_default();
        entry.0 += 1;
        if stime == t {
            entry.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(pid, (total, new))| Icr { pid, t, total, new })
        .collect()
}

/// Count for one partition from its time-ordered results.
pub fn partition_count(icrs: &[Icr], interval: TimeInterval) -> u64 {
    let start = icrs.partition_point(|i| i.t < interval.ts);
    let mut count = 0u64;
    for icr in &icrs[start..] {
        if icr.t > interval.te {
            break;
        }
        count += u64::from(if icr.t == interval.ts { icr.total } else { icr.new });
    }
    count
}

/// Time-ordered results of one partition, cut at the watermark.
pub fn load_icrs(
    store: &dyn KvBackend,
    pid: Pid,
    watermark: Cycle,
) -> Result<Vec<Icr>, StoreError> {
    let mut out = Vec::new();
    for raw in store.list(&keys::icr_key(pid))? {
        let icr = Icr::decode(pid, &raw)?;
        if icr.t > watermark {
            break;
        }
        out.push(icr);
    }
    Ok(out)
}

/// Probe count over `pids`: one map per partition, one summing reduce.
pub fn pcag_count(
    store: &dyn KvBackend,
    pids: &[Pid],
    interval: TimeInterval,
    watermark: Cycle,
) -> Result<u64, QueryError> {
    if interval.ts > watermark {
        return Ok(0);
    }
    let interval = TimeInterval {
        ts: interval.ts,
        te: interval.te.min(watermark),
    };
    let partials: Result<Vec<u64>, StoreError> = pids
        .par_iter()
        .map(|&pid| Ok(partition_count(&load_icrs(store, pid, watermark)?, interval)))
        .collect();
    Ok(partials?.into_iter().sum())
}
