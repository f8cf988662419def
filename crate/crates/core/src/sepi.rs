//! Single-endpoint interval index and the two-endpoint baseline.
//!
//! SEPI keeps one pair `<oid|stime, etime>` per event and rewrites `etime`
//! every cycle the object stays flagged. An interval query is one prefix
//! scan plus a predicate filter. EPI keeps a start record and an end record
//! per event and needs an endpoint scan, a distinct pass, and a second scan
//! for events that pierce the interval.

use std::collections::{BTreeSet, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::domain::{ActiveMap, Cycle, Eid, Eset, ScientificEvent, TimeInterval};
use crate::error::{QueryError, StoreError};
use crate::keys::{self, EPI_PREFIX, SEPI_PREFIX};
use crate::storage::{KvBackend, Value, WriteOp};

/// Event state changes caused by one cycle's Eset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transition {
    pub t: Cycle,
    pub opened: Vec<Eid>,
    pub continued: Vec<Eid>,
    pub closed: Vec<Eid>,
    pub active: ActiveMap,
}

/// Open, extend, or close events for cycle `t`. An active object missing
/// from the Eset closes its event; a later reappearance opens a new one.
pub fn transition(eset: &Eset, active: &ActiveMap, t: Cycle) -> Transition {
    let flagged: BTreeSet<&str> = eset.oids.iter().map(String::as_str).collect();
    let mut out = Transition {
        t,
        ..Default::default()
    };
    for oid in &flagged {
        match active.get(*oid) {
            Some(eid) => {
                out.continued.push(eid.clone());
                out.active.insert(oid.to_string(), eid.clone());
            }
            None => match Eid::new(*oid, t) {
                Ok(eid) => {
                    out.opened.push(eid.clone());
                    out.active.insert(oid.to_string(), eid);
                }
                Err(e) => log::warn!("ignoring flagged object: {e}"),
            },
        }
    }
    out.closed = active
        .iter()
        .filter(|(oid, _)| !flagged.contains(oid.as_str()))
        .map(|(_, eid)| eid.clone())
        .collect();
    out
}

/// Writes that bring SEPI up to date with `tr`. Closed events need none:
/// their last value stands as `etime`.
pub fn sepi_ops(unit: u32, tr: &Transition) -> Vec<WriteOp> {
    let value = tr.t.to_string();
    tr.opened
        .iter()
        .chain(&tr.continued)
        .map(|eid| WriteOp::put(keys::sepi_key(unit, eid), value.clone()))
        .collect()
}

/// Writes that bring the EPI baseline up to date with `tr`.
pub fn epi_ops(unit: u32, tr: &Transition) -> Vec<WriteOp> {
    let mut ops = Vec::with_capacity(2 * (tr.opened.len() + tr.continued.len()));
    for eid in tr.opened.iter().chain(&tr.continued) {
        ops.push(WriteOp::put(
            keys::epi_start_key(unit, eid),
            format!("{}|{}", eid.stime(), tr.t),
        ));
        ops.push(WriteOp::put(keys::epi_end_key(unit, eid), tr.t.to_string()));
    }
    ops
}

/// An indexed event and the unit that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitEvent {
    pub unit: u32,
    pub event: ScientificEvent,
}

/// Clip an event to the read watermark. Events are contiguous, so one
/// still open past the watermark had `etime = watermark` at that point.
fn visible(unit: u32, eid: Eid, etime: Cycle, watermark: Cycle) -> Option<UnitEvent> {
    if eid.stime() > watermark {
        return None;
    }
    let etime = etime.min(watermark);
    ScientificEvent::new(eid, etime)
        .ok()
        .map(|event| UnitEvent { unit, event })
}

fn scalar_cycle(key: &str, value: &Value) -> Result<Cycle, StoreError> {
    match value {
        Value::Scalar(v) => keys::decode_cycle(v).ok_or_else(|| StoreError::Corrupt {
            key: key.to_string(),
            why: "expected a cycle index".into(),
        }),
        Value::List(_) => Err(StoreError::WrongType(key.to_string())),
    }
}

pub struct SepiIndex<'a> {
    store: &'a dyn KvBackend,
}

impl<'a> SepiIndex<'a> {
    pub fn new(store: &'a dyn KvBackend) -> Self {
        Self { store }
    }

    /// Write `tr` directly (outside an ingest batch).
    pub fn sepi_update(
        &self,
        unit: u32,
        eset: &Eset,
        active: &ActiveMap,
        t: Cycle,
    ) -> Result<ActiveMap, StoreError> {
        let tr = transition(eset, active, t);
        for op in sepi_ops(unit, &tr) {
            if let WriteOp::Put { key, value } = op {
                self.store.update(&key, &mut |_| value.clone())?;
            }
        }
        Ok(tr.active)
    }

    /// Events whose span meets `interval`, as of `watermark`: scan entries
    /// with `etime >= ts`, keep those with `stime <= te`.
    pub fn query(
        &self,
        interval: TimeInterval,
        watermark: Cycle,
    ) -> Result<Vec<UnitEvent>, QueryError> {
        let mut out = Vec::new();
        for (key, value) in self.store.scan_prefix(SEPI_PREFIX)? {
            let etime = scalar_cycle(&key, &value)?;
            let (unit, eid) = keys::parse_index_key(SEPI_PREFIX, &key).ok_or_else(|| {
                StoreError::Corrupt {
                    key: key.clone(),
                    why: "bad index key".into(),
                }
            })?;
            if let Some(ev) = visible(unit, eid, etime, watermark) {
                if ev.event.etime >= interval.ts && ev.event.stime <= interval.te {
                    out.push(ev);
                }
            }
        }
        Ok(out)
    }

    /// Current `etime` of one event, if indexed.
    pub fn etime(&self, unit: u32, eid: &Eid) -> Result<Option<Cycle>, QueryError> {
        let key = keys::sepi_key(unit, eid);
        match self.store.get(&key)? {
            None => Ok(None),
            Some(v) => Ok(Some(scalar_cycle(&key, &Value::Scalar(v))?)),
        }
    }

    pub fn entry_count(&self) -> Result<usize, QueryError> {
        Ok(self.store.scan_prefix(SEPI_PREFIX)?.len())
    }
}

/// Two-record endpoint index kept for comparison against SEPI.
pub struct EpiIndex<'a> {
    store: &'a dyn KvBackend,
    dedup_passes: AtomicU64,
}

enum EpiRecord {
    Start { stime: Cycle, etime: Cycle },
    End { etime: Cycle },
}

impl<'a> EpiIndex<'a> {
    pub fn new(store: &'a dyn KvBackend) -> Self {
        Self {
            store,
            dedup_passes: AtomicU64::new(0),
        }
    }

    /// Write both records of every event in `events`.
    pub fn build<'e>(
        &self,
        events: impl IntoIterator<Item = &'e UnitEvent>,
    ) -> Result<(), StoreError> {
        let mut ops = Vec::new();
        for ev in events {
            let eid = &ev.event.eid;
            ops.push(WriteOp::put(
                keys::epi_start_key(ev.unit, eid),
                format!("{}|{}", ev.event.stime, ev.event.etime),
            ));
            ops.push(WriteOp::put(
                keys::epi_end_key(ev.unit, eid),
                ev.event.etime.to_string(),
            ));
        }
        let ack = self.store.write_batch(&ops)?;
        match ack.first_error() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn dedup_passes(&self) -> u64 {
        self.dedup_passes.load(Ordering::Relaxed)
    }

    fn records(&self) -> Result<Vec<(u32, Eid, EpiRecord)>, QueryError> {
        let mut out = Vec::new();
        for (key, value) in self.store.scan_prefix(EPI_PREFIX)? {
            let corrupt = |why: &str| StoreError::Corrupt {
                key: key.clone(),
                why: why.into(),
            };
            let Value::Scalar(raw) = &value else {
                return Err(StoreError::WrongType(key.clone()).into());
            };
            let text = std::str::from_utf8(raw).map_err(|_| corrupt("non-utf8 value"))?;
            let (stem, kind) = key.rsplit_once(':').ok_or_else(|| corrupt("bad key"))?;
            let (unit, eid) =
                keys::parse_index_key(EPI_PREFIX, stem).ok_or_else(|| corrupt("bad key"))?;
            let record = match kind {
                "s" => {
                    let (s, e) = text.split_once('|').ok_or_else(|| corrupt("bad start record"))?;
                    EpiRecord::Start {
                        stime: s.parse().map_err(|_| corrupt("bad stime"))?,
                        etime: e.parse().map_err(|_| corrupt("bad etime"))?,
                    }
                }
                "e" => EpiRecord::End {
                    etime: text.parse().map_err(|_| corrupt("bad etime"))?,
                },
                _ => return Err(corrupt("unknown record kind").into()),
            };
            out.push((unit, eid, record));
        }
        Ok(out)
    }

    pub fn query(
        &self,
        interval: TimeInterval,
        watermark: Cycle,
    ) -> Result<Vec<UnitEvent>, QueryError> {
        let (ts, te) = (interval.ts, interval.te);

        // scan 1: events with an endpoint inside [ts, te]
        let mut endpoint_hits = Vec::new();
        for (unit, eid, record) in self.records()? {
            match record {
                EpiRecord::Start { stime, etime } => {
                    if let Some(ev) = visible(unit, eid, etime, watermark) {
                        if (ts..=te).contains(&stime) {
                            endpoint_hits.push(ev);
                        }
                    }
                }
                EpiRecord::End { etime } => {
                    if let Some(ev) = visible(unit, eid, etime, watermark) {
                        if (ts..=te).contains(&ev.event.etime) {
                            endpoint_hits.push(ev);
                        }
                    }
                }
            }
        }
        self.dedup_passes.fetch_add(1, Ordering::Relaxed);
        let mut seen = HashSet::with_capacity(endpoint_hits.len());
        let mut out: Vec<UnitEvent> = endpoint_hits
            .into_iter()
            .filter(|ev| seen.insert((ev.unit, ev.event.eid.clone())))
            .collect();

        // scan 2: events that pierce [ts, te]
        for (unit, eid, record) in self.records()? {
            if let EpiRecord::Start { etime, .. } = record {
                if let Some(ev) = visible(unit, eid, etime, watermark) {
                    if ev.event.stime < ts && ev.event.etime > te {
                        out.push(ev);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn entry_count(&self) -> Result<usize, QueryError> {
        Ok(self.store.scan_prefix(EPI_PREFIX)?.len())
    }
}
