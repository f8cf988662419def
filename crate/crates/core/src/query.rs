//! Probing, listing, and stretching over committed data, plus the precise
//! in-circle count used to measure probe accuracy.

use std::collections::HashSet;

use serde::Serialize;

use crate::domain::{CatalogTuple, Cycle, Eid, Region, ScientificEvent, TimeInterval, ValidTuple};
use crate::epgrid::{GridSet, Pid};
use crate::error::QueryError;
use crate::ingest::Watermark;
use crate::keys;
use crate::pcag::pcag_count;
use crate::sepi::{SepiIndex, UnitEvent};
use crate::storage::{KvBackend, SharedStore};

/// Full time series of one event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSeries {
    pub unit: u32,
    pub event: ScientificEvent,
    pub pid: Pid,
    pub rows: Vec<CatalogTuple>,
}

impl EventSeries {
    /// Position of the object at the event start.
    pub fn position(&self) -> (f64, f64) {
        self.rows.first().map(|r| (r.x, r.y)).unwrap_or((f64::NAN, f64::NAN))
    }
}

/// Reduced rows of one object over a widened interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRange {
    pub eid: Eid,
    pub oid: String,
    pub pid: Pid,
    pub interval: TimeInterval,
    pub rows: Vec<ValidTuple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub probe: u64,
    pub pcse: u64,
    /// `pcse / probe`; `None` when the probe count is zero.
    pub accuracy: Option<f64>,
}

/// Split a stored event row `<unit>:<cell>|<row>`.
pub fn decode_event_row(key: &str, item: &[u8]) -> Result<(Pid, CatalogTuple), QueryError> {
    let integrity = |why: String| QueryError::Integrity(format!("{key}: {why}"));
    let text = std::str::from_utf8(item).map_err(|_| integrity("non-utf8 row".into()))?;
    let (pid, row) = text
        .split_once('|')
        .ok_or_else(|| integrity(format!("missing partition tag in {text:?}")))?;
    let pid: Pid = pid.parse().map_err(|e| integrity(format!("{e}")))?;
    let row = CatalogTuple::parse_row(row).map_err(|e| integrity(format!("{e}")))?;
    Ok((pid, row))
}

pub struct QueryEngine {
    store: SharedStore,
    grids: GridSet,
    watermark: Watermark,
}

impl QueryEngine {
    pub fn new(store: SharedStore, grids: GridSet, watermark: Watermark) -> Self {
        Self {
            store,
            grids,
            watermark,
        }
    }

    pub fn grids(&self) -> &GridSet {
        &self.grids
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn watermark(&self) -> Cycle {
        self.watermark.get()
    }

    pub fn region_pids(&self, reg: Option<&Region>) -> Vec<Pid> {
        match reg {
            Some(r) => self.grids.parse_region(r),
            None => self.grids.all_pids(),
        }
    }

    /// Number of events meeting `interval` in the partitions covered by `reg`.
    pub fn probe(&self, reg: Option<&Region>, interval: TimeInterval) -> Result<u64, QueryError> {
        self.probe_pids(&self.region_pids(reg), interval)
    }

    pub fn probe_pids(&self, pids: &[Pid], interval: TimeInterval) -> Result<u64, QueryError> {
        pcag_count(self.store.as_ref(), pids, interval, self.watermark.get())
    }

    /// Events meeting `interval`, each with its complete series.
    pub fn list_events(
        &self,
        reg: Option<&Region>,
        interval: TimeInterval,
    ) -> Result<Vec<EventSeries>, QueryError> {
        let filter: Option<HashSet<Pid>> = reg.map(|r| self.grids.parse_region(r).into_iter().collect());
        self.list_in(filter.as_ref(), interval)
    }

    /// Listing restricted to a partition set (`None` means everywhere).
    pub fn list_in(
        &self,
        pids: Option<&HashSet<Pid>>,
        interval: TimeInterval,
    ) -> Result<Vec<EventSeries>, QueryError> {
        let wm = self.watermark.get();
        let mut hits = SepiIndex::new(self.store.as_ref()).query(interval, wm)?;
        hits.sort();
        let mut out = Vec::with_capacity(hits.len());
        for hit in hits {
            if let Some(set) = pids {
                if !set.contains(&self.event_pid(&hit.event.eid)?) {
                    continue;
                }
            }
            out.push(self.load_series(hit, wm)?);
        }
        Ok(out)
    }

    /// Partition of an event, from the tag on its first stored row.
    pub fn event_pid(&self, eid: &Eid) -> Result<Pid, QueryError> {
        let key = keys::event_key(eid);
        let first = self.store.list_range(&key, 0, Some(1))?;
        let item = first
            .first()
            .ok_or_else(|| QueryError::Integrity(format!("no series stored for event {eid}")))?;
        Ok(decode_event_row(&key, item)?.0)
    }

    fn load_series(&self, hit: UnitEvent, wm: Cycle) -> Result<EventSeries, QueryError> {
        let key = keys::event_key(&hit.event.eid);
        let mut rows = Vec::new();
        let mut pid = None;
        for item in self.store.list(&key)? {
            let (p, row) = decode_event_row(&key, &item)?;
            if row.t > wm {
                break;
            }
            pid.get_or_insert(p);
            rows.push(row);
        }
        let pid = pid.ok_or_else(|| {
            QueryError::Integrity(format!("no series stored for event {}", hit.event.eid))
        })?;
        let expected = (hit.event.etime - hit.event.stime + 1) as usize;
        let contiguous = rows
            .iter()
            .zip(hit.event.stime..)
            .all(|(r, t)| r.t == t && r.oid == hit.event.oid());
        if rows.len() != expected || !contiguous {
            return Err(QueryError::Integrity(format!(
                "series of {} has {} rows for span [{}, {}]",
                hit.event.eid,
                rows.len(),
                hit.event.stime,
                hit.event.etime
            )));
        }
        Ok(EventSeries {
            unit: hit.unit,
            event: hit.event,
            pid,
            rows,
        })
    }

    /// Partition rows of the event's object over `[stime - dt1, etime + dt2]`.
    pub fn stretch(&self, eid: &Eid, dt1: Cycle, dt2: Cycle) -> Result<SeriesRange, QueryError> {
        let wm = self.watermark.get();
        let unknown = || QueryError::UnknownEvent(eid.to_string());
        if eid.stime() > wm {
            return Err(unknown());
        }
        let key = keys::event_key(eid);
        let first = self.store.list_range(&key, 0, Some(1))?;
        let (pid, _) = decode_event_row(&key, first.first().ok_or_else(unknown)?)?;
        let etime = SepiIndex::new(self.store.as_ref())
            .etime(pid.unit, eid)?
            .ok_or_else(unknown)?
            .min(wm);
        let interval = TimeInterval {
            ts: eid.stime().saturating_sub(dt1),
            te: etime.saturating_add(dt2).min(wm),
        };

        let part = keys::part_key(pid);
        let mut rows = Vec::new();
        for item in self.store.list(&part)? {
            let text = std::str::from_utf8(&item)
                .map_err(|_| QueryError::Integrity(format!("{part}: non-utf8 item")))?;
            for line in text.lines() {
                // cheap oid check before parsing the numbers
                if line.split(',').next() != Some(eid.oid()) {
                    continue;
                }
                let row = ValidTuple::parse_row(line)
                    .map_err(|e| QueryError::Integrity(format!("{part}: {e}")))?;
                if interval.contains(row.t) {
                    rows.push(row);
                }
            }
        }
        rows.sort_by_key(|r| r.t);
        Ok(SeriesRange {
            eid: eid.clone(),
            oid: eid.oid().to_string(),
            pid,
            interval,
            rows,
        })
    }

    /// Listing over `reg`, then keep only events whose position is in the disk.
    pub fn pcse_count(&self, reg: &Region, interval: TimeInterval) -> Result<u64, QueryError> {
        let listed = self.list_events(Some(reg), interval)?;
        Ok(listed
            .iter()
            .filter(|s| {
                let (x, y) = s.position();
                reg.contains(x, y)
            })
            .count() as u64)
    }

    pub fn accuracy(&self, reg: &Region, interval: TimeInterval) -> Result<AccuracyReport, QueryError> {
        let probe = self.probe(Some(reg), interval)?;
        let pcse = self.pcse_count(reg, interval)?;
        Ok(AccuracyReport {
            probe,
            pcse,
            accuracy: (probe > 0).then(|| pcse as f64 / probe as f64),
        })
    }
}
