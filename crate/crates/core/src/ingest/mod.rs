//! Per-cycle insertion pipeline in master/worker form.
//!
//! One [`Worker`] per observation unit turns a catalog and its Eset into a
//! single store batch: partition data, event rows, index entries, and count
//! results. The batch commits atomically or not at all, so a failed cycle can
//! be retried without duplicating list items. The [`Master`] tracks workers
//! and publishes the read watermark: the highest cycle committed by every
//! unit. Readers never look past it.

pub mod files;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::Serialize;

use crate::dafilter::filter_cycle;
use crate::domain::{ActiveMap, CatalogTuple, Cycle, Eid, Eset};
use crate::epgrid::{GridSet, PartitionGrid, Pid};
use crate::error::{IngestError, StoreError};
use crate::keys;
use crate::pcag::{emit_icrs, Icr};
use crate::sepi::{epi_ops, sepi_ops, transition};
use crate::storage::{SharedStore, WriteOp};

#[derive(Debug, Clone, PartialEq)]
pub struct CycleBatch {
    pub unit: u32,
    pub t: Cycle,
    pub catalog: Vec<CatalogTuple>,
    pub eset: Eset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestConfig {
    /// Major attributes kept in partition data.
    pub c: usize,
    /// Extra attempts for a failed batch write before the unit stalls.
    pub retries: u32,
    /// Also maintain the two-record endpoint index.
    pub maintain_epi: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            c: 1,
            retries: 3,
            maintain_epi: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub unit: u32,
    pub t: Cycle,
    pub latency_secs: f64,
    pub rows: usize,
    pub active_events: usize,
    pub new_events: usize,
    pub closed_events: usize,
    pub missing_flagged: usize,
    pub partitions_written: usize,
    pub appends: usize,
    pub puts: usize,
    /// Key and payload bytes of the whole batch.
    pub bytes_written: u64,
    /// Payload bytes of partition data only.
    pub valid_bytes: u64,
    /// Size of the catalog in its text file layout.
    pub raw_bytes: u64,
    pub attempts: u32,
    pub key_count: u64,
    pub icrs: Vec<Icr>,
}

pub struct Worker {
    unit: u32,
    grid: PartitionGrid,
    store: SharedStore,
    cfg: IngestConfig,
    active: ActiveMap,
    event_pids: HashMap<Eid, Pid>,
    last_t: Option<Cycle>,
}

impl Worker {
    pub fn new(grid: PartitionGrid, store: SharedStore, cfg: IngestConfig) -> Self {
        Self {
            unit: grid.unit,
            grid,
            store,
            cfg,
            active: ActiveMap::new(),
            event_pids: HashMap::new(),
            last_t: None,
        }
    }

    pub fn unit(&self) -> u32 {
        self.unit
    }

    pub fn grid(&self) -> &PartitionGrid {
        &self.grid
    }

    pub fn last_cycle(&self) -> Option<Cycle> {
        self.last_t
    }

    pub fn active(&self) -> &ActiveMap {
        &self.active
    }

    /// Persist partition metadata, one record per partition.
    pub fn publish_metadata(&self) -> Result<(), IngestError> {
        let ops: Vec<WriteOp> = self
            .grid
            .metas()
            .map(|m| WriteOp::put(m.key(), m.encode()))
            .collect();
        self.commit(0, &ops).map(|_| ())
    }

    fn commit(&self, t: Cycle, ops: &[WriteOp]) -> Result<u32, IngestError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let err = match self.store.write_batch(ops) {
                Ok(ack) if ack.committed => return Ok(attempts),
                Ok(ack) => {
                    // a rejected item will be rejected again
                    let source = ack
                        .first_error()
                        .cloned()
                        .unwrap_or_else(|| StoreError::Protocol("batch not committed".into()));
                    return Err(IngestError::Store {
                        unit: self.unit,
                        t,
                        attempts,
                        source,
                    });
                }
                Err(e) => e,
            };
            if attempts > self.cfg.retries {
                return Err(IngestError::Store {
                    unit: self.unit,
                    t,
                    attempts,
                    source: err,
                });
            }
            log::warn!("unit {} cycle {t}: write failed ({err}), retrying", self.unit);
            std::thread::sleep(Duration::from_millis(u64::from(attempts)));
        }
    }

    /// Filter, partition, index, pre-aggregate, and write one cycle. On error
    /// nothing is visible and the worker's state is unchanged.
    pub fn process_cycle(&mut self, batch: &CycleBatch) -> Result<IngestStats, IngestError> {
        let started = Instant::now();
        let t = batch.t;
        if let Some(last) = self.last_t {
            if t != last + 1 {
                return Err(IngestError::OutOfOrder {
                    unit: self.unit,
                    expected: last + 1,
                    got: t,
                });
            }
        }
        if batch.eset.t != t {
            return Err(IngestError::MixedCycle {
                unit: self.unit,
                t,
                row_t: batch.eset.t,
            });
        }
        if let Some(row) = batch.catalog.iter().find(|r| r.t != t) {
            return Err(IngestError::MixedCycle {
                unit: self.unit,
                t,
                row_t: row.t,
            });
        }

        let filtered = filter_cycle(&batch.catalog, &batch.eset, &self.active, self.cfg.c);
        let present = Eset::new(
            t,
            filtered.event_rows.keys().map(|e| e.oid().to_string()).collect(),
        );
        let tr = transition(&present, &self.active, t);

        let mut new_pids = HashMap::with_capacity(tr.opened.len());
        for eid in &tr.opened {
            let row = &filtered.event_rows[eid];
            new_pids.insert(eid.clone(), self.grid.partition_of(row.x, row.y)?);
        }
        let pid_of = |eid: &Eid| -> Pid {
            new_pids
                .get(eid)
                .or_else(|| self.event_pids.get(eid))
                .copied()
                .expect("every active event has a partition")
        };

        let mut ops = Vec::new();
        let mut stats = IngestStats {
            unit: self.unit,
            t,
            rows: batch.catalog.len(),
            missing_flagged: filtered.missing,
            ..Default::default()
        };

        let mut by_partition: BTreeMap<Pid, String> = BTreeMap::new();
        for row in &filtered.valid {
            let pid = self.grid.partition_of(row.x, row.y)?;
            let buf = by_partition.entry(pid).or_default();
            if !buf.is_empty() {
                buf.push('\n');
            }
            buf.push_str(&row.to_row());
        }
        stats.partitions_written = by_partition.len();
        for (pid, item) in by_partition {
            stats.valid_bytes += item.len() as u64;
            ops.push(WriteOp::append(keys::part_key(pid), item));
        }

        for (eid, row) in &filtered.event_rows {
            ops.push(WriteOp::append(
                keys::event_key(eid),
                format!("{}|{}", pid_of(eid), row.to_row()),
            ));
        }

        ops.extend(sepi_ops(self.unit, &tr));
        if self.cfg.maintain_epi {
            ops.extend(epi_ops(self.unit, &tr));
        }

        let icrs = emit_icrs(t, tr.active.values().map(|eid| (pid_of(eid), eid.stime())));
        ops.extend(icrs.iter().map(Icr::op));

        stats.attempts = self.commit(t, &ops)?;

        for op in &ops {
            stats.bytes_written += (op.key().len() + op.payload_len()) as u64;
            match op {
                WriteOp::Append { .. } => stats.appends += 1,
                WriteOp::Put { .. } => stats.puts += 1,
            }
        }
        stats.active_events = tr.active.len();
        stats.new_events = tr.opened.len();
        stats.closed_events = tr.closed.len();
        stats.icrs = icrs;

        for eid in &tr.closed {
            self.event_pids.remove(eid);
        }
        self.event_pids.extend(new_pids);
        self.active = tr.active;
        self.last_t = Some(t);
        stats.latency_secs = started.elapsed().as_secs_f64();

        // bookkeeping below is not part of the cycle's latency
        stats.raw_bytes = batch
            .catalog
            .iter()
            .map(|r| r.to_row().len() as u64 + 1)
            .sum();
        stats.key_count = self.store.key_count().unwrap_or(0);
        Ok(stats)
    }
}

/// Shared read handle on the committed cycle. 0 means nothing committed.
#[derive(Debug, Clone, Default)]
pub struct Watermark(Arc<AtomicU64>);

impl Watermark {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed watermark, for reading a finished store.
    pub fn fixed(t: Cycle) -> Self {
        Self(Arc::new(AtomicU64::new(t)))
    }

    pub fn get(&self) -> Cycle {
        self.0.load(Ordering::Acquire)
    }

    fn advance(&self, t: Cycle) {
        self.0.fetch_max(t, Ordering::AcqRel);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitStatus {
    pub unit: u32,
    pub committed: Cycle,
    pub stalled: bool,
    #[serde(skip)]
    pub last_heartbeat: Instant,
}

/// Registers workers, monitors heartbeats, and owns the watermark.
#[derive(Debug, Default)]
pub struct Master {
    units: Mutex<BTreeMap<u32, UnitStatus>>,
    watermark: Watermark,
}

impl Master {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn watermark(&self) -> Watermark {
        self.watermark.clone()
    }

    pub fn register_worker(&self, unit: u32) -> Result<(), IngestError> {
        let mut units = self.units.lock();
        if units.contains_key(&unit) {
            return Err(IngestError::DuplicateWorker(unit));
        }
        units.insert(
            unit,
            UnitStatus {
                unit,
                committed: 0,
                stalled: false,
                last_heartbeat: Instant::now(),
            },
        );
        Ok(())
    }

    pub fn heartbeat(&self, unit: u32) -> Result<(), IngestError> {
        self.heartbeat_at(unit, Instant::now())
    }

    pub fn heartbeat_at(&self, unit: u32, at: Instant) -> Result<(), IngestError> {
        let mut units = self.units.lock();
        let status = units.get_mut(&unit).ok_or(IngestError::UnknownWorker(unit))?;
        status.last_heartbeat = at;
        status.stalled = false;
        Ok(())
    }

    /// Record that `unit` committed cycle `t`; returns the new watermark.
    pub fn commit(&self, unit: u32, t: Cycle) -> Result<Cycle, IngestError> {
        let mut units = self.units.lock();
        let status = units.get_mut(&unit).ok_or(IngestError::UnknownWorker(unit))?;
        status.committed = status.committed.max(t);
        status.last_heartbeat = Instant::now();
        status.stalled = false;
        let low = units.values().map(|s| s.committed).min().unwrap_or(0);
        self.watermark.advance(low);
        Ok(self.watermark.get())
    }

    pub fn mark_stalled(&self, unit: u32) {
        if let Some(s) = self.units.lock().get_mut(&unit) {
            s.stalled = true;
        }
    }

    /// Flag units silent for longer than `timeout`; returns them.
    pub fn check_liveness_at(&self, now: Instant, timeout: Duration) -> Vec<u32> {
        let mut units = self.units.lock();
        let mut stalled = Vec::new();
        for s in units.values_mut() {
            if now.saturating_duration_since(s.last_heartbeat) > timeout {
                s.stalled = true;
            }
            if s.stalled {
                stalled.push(s.unit);
            }
        }
        stalled
    }

    pub fn check_liveness(&self, timeout: Duration) -> Vec<u32> {
        self.check_liveness_at(Instant::now(), timeout)
    }

    pub fn units(&self) -> Vec<UnitStatus> {
        self.units.lock().values().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitFailure {
    pub unit: u32,
    pub t: Cycle,
    pub error: String,
}

/// Outcome of one cycle across all units.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CycleReport {
    pub t: Cycle,
    pub watermark: Cycle,
    /// Slowest unit; units run in parallel.
    pub latency_secs: f64,
    pub new_events: usize,
    pub active_events: usize,
    pub stats: Vec<IngestStats>,
    pub failures: Vec<UnitFailure>,
}

/// Master plus one worker per unit grid, sharing a store.
pub struct Pipeline {
    store: SharedStore,
    grids: GridSet,
    master: Arc<Master>,
    workers: Vec<Mutex<Worker>>,
}

impl Pipeline {
    pub fn new(store: SharedStore, grids: GridSet, cfg: IngestConfig) -> Result<Self, IngestError> {
        let master = Arc::new(Master::new());
        let mut workers = Vec::with_capacity(grids.grids().len());
        for grid in grids.grids() {
            master.register_worker(grid.unit)?;
            let worker = Worker::new(grid.clone(), store.clone(), cfg);
            worker.publish_metadata()?;
            workers.push(Mutex::new(worker));
        }
        Ok(Self {
            store,
            grids,
            master,
            workers,
        })
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn grids(&self) -> &GridSet {
        &self.grids
    }

    pub fn master(&self) -> &Arc<Master> {
        &self.master
    }

    pub fn watermark(&self) -> Watermark {
        self.master.watermark()
    }

    fn worker(&self, unit: u32) -> Option<&Mutex<Worker>> {
        self.grids
            .grids()
            .binary_search_by_key(&unit, |g| g.unit)
            .ok()
            .map(|i| &self.workers[i])
    }

    /// Run one cycle's batches, one per unit, in parallel. Failed units are
    /// marked stalled and hold the watermark back; the others commit.
    pub fn process(&self, batches: &[CycleBatch]) -> CycleReport {
        let results: Vec<(u32, Cycle, Result<IngestStats, IngestError>)> = batches
            .par_iter()
            .map(|b| {
                let res = match self.worker(b.unit) {
                    Some(w) => w.lock().process_cycle(b),
                    None => Err(IngestError::UnknownWorker(b.unit)),
                };
                (b.unit, b.t, res)
            })
            .collect();

        let mut report = CycleReport {
            t: batches.iter().map(|b| b.t).max().unwrap_or(0),
            ..Default::default()
        };
        for (unit, t, res) in results {
            match res {
                Ok(stats) => {
                    if let Err(e) = self.master.commit(unit, t) {
                        report.failures.push(UnitFailure {
                            unit,
                            t,
                            error: e.to_string(),
                        });
                        continue;
                    }
                    report.latency_secs = report.latency_secs.max(stats.latency_secs);
                    report.new_events += stats.new_events;
                    report.active_events += stats.active_events;
                    report.stats.push(stats);
                }
                Err(e) => {
                    log::error!("unit {unit} cycle {t}: {e}");
                    self.master.mark_stalled(unit);
                    report.failures.push(UnitFailure {
                        unit,
                        t,
                        error: e.to_string(),
                    });
                }
            }
        }
        report.stats.sort_by_key(|s| s.unit);
        report.watermark = self.master.watermark().get();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{FlakyStore, KvBackend, MemoryStore};

    fn grid() -> PartitionGrid {
        PartitionGrid::with_shape(0, (0.0, 0.0), 1.0, 2, 2).unwrap()
    }

    fn batch(t: Cycle, flagged: &[&str]) -> CycleBatch {
        let catalog = [("a", 0.1, 0.1), ("b", 0.2, 0.2), ("c", 0.3, 0.3)]
            .iter()
            .map(|(o, x, y)| CatalogTuple::new(*o, *x, *y, t, vec![1.0, 2.0, 3.0]))
            .collect();
        CycleBatch {
            unit: 0,
            t,
            catalog,
            eset: Eset::new(t, flagged.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn quiet_cycle_writes_only_partition_data() {
        let store = MemoryStore::new().shared();
        let mut w = Worker::new(grid(), store.clone(), IngestConfig::default());
        let stats = w.process_cycle(&batch(1, &[])).unwrap();
        assert_eq!(stats.partitions_written, 1);
        assert_eq!((stats.appends, stats.puts), (1, 0));
        assert!(stats.icrs.is_empty());
        assert!(store.scan_prefix("sepi:").unwrap().is_empty());
        let items = store.list("part:0:0").unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(
            String::from_utf8(items[0].clone()).unwrap(),
            "a,0.1,0.1,1,1\nb,0.2,0.2,1,1\nc,0.3,0.3,1,1"
        );
    }

    #[test]
    fn single_new_event_counts_one() {
        let store = MemoryStore::new().shared();
        let mut w = Worker::new(grid(), store.clone(), IngestConfig::default());
        w.process_cycle(&batch(1, &[])).unwrap();
        w.process_cycle(&batch(2, &[])).unwrap();
        let stats = w.process_cycle(&batch(3, &["a"])).unwrap();
        assert_eq!(stats.icrs.len(), 1);
        assert_eq!(stats.icrs[0].encode(), "1|1|3");
        assert_eq!(store.get("sepi:0:a|00000000000000000003").unwrap(), Some(b"3".to_vec()));
        let ev = store.list("ev:a|3").unwrap();
        assert_eq!(String::from_utf8(ev[0].clone()).unwrap(), "0:0|a,0.1,0.1,3,1,2,3");

        let stats = w.process_cycle(&batch(4, &["a", "b"])).unwrap();
        assert_eq!(stats.icrs[0].encode(), "2|1|4");
    }

    #[test]
    fn cycles_must_be_consecutive() {
        let store = MemoryStore::new().shared();
        let mut w = Worker::new(grid(), store, IngestConfig::default());
        w.process_cycle(&batch(5, &[])).unwrap();
        assert!(matches!(
            w.process_cycle(&batch(7, &[])),
            Err(IngestError::OutOfOrder { expected: 6, got: 7, .. })
        ));
        let mut mixed = batch(6, &[]);
        mixed.catalog[1].t = 5;
        assert!(matches!(w.process_cycle(&mixed), Err(IngestError::MixedCycle { .. })));
        w.process_cycle(&batch(6, &[])).unwrap();
    }

    #[test]
    fn out_of_area_rows_are_rejected() {
        let store = MemoryStore::new().shared();
        let mut w = Worker::new(grid(), store.clone(), IngestConfig::default());
        let mut b = batch(1, &[]);
        b.catalog[0].x = 2.0;
        assert!(matches!(w.process_cycle(&b), Err(IngestError::Grid(_))));
        assert_eq!(store.key_count().unwrap(), 0);
    }

    #[test]
    fn failed_write_is_retried_then_stalls() {
        let flaky = Arc::new(FlakyStore::new(MemoryStore::new()));
        let cfg = IngestConfig {
            retries: 2,
            ..IngestConfig::default()
        };
        let mut w = Worker::new(grid(), flaky.clone(), cfg);
        flaky.fail_next(2);
        let stats = w.process_cycle(&batch(1, &["a"])).unwrap();
        assert_eq!(stats.attempts, 3);

        flaky.fail_next(3);
        let err = w.process_cycle(&batch(2, &["a"])).unwrap_err();
        assert!(matches!(err, IngestError::Store { attempts: 3, .. }));
        // nothing from the failed cycle is visible and the cycle can be redone
        assert_eq!(flaky.list("ev:a|1").unwrap().len(), 1);
        assert_eq!(w.last_cycle(), Some(1));
        w.process_cycle(&batch(2, &["a"])).unwrap();
        assert_eq!(flaky.list("ev:a|1").unwrap().len(), 2);
        assert_eq!(flaky.list("icr:0:0").unwrap().len(), 2);
    }

    #[test]
    fn master_watermark_is_min_over_units() {
        let m = Master::new();
        m.register_worker(0).unwrap();
        m.register_worker(1).unwrap();
        assert!(matches!(m.register_worker(1), Err(IngestError::DuplicateWorker(1))));
        for t in 1..=5 {
            m.commit(0, t).unwrap();
            m.commit(1, t).unwrap();
        }
        assert_eq!(m.watermark().get(), 5);
        m.commit(0, 6).unwrap();
        assert_eq!(m.watermark().get(), 5);
        assert!(m.commit(7, 1).is_err());
        assert!(m.heartbeat(7).is_err());
    }

    #[test]
    fn stalled_unit_holds_watermark() {
        let m = Master::new();
        m.register_worker(0).unwrap();
        m.register_worker(1).unwrap();
        for t in 1..=4 {
            m.commit(0, t).unwrap();
            m.commit(1, t).unwrap();
        }
        m.commit(0, 5).unwrap();
        m.commit(0, 6).unwrap();
        let later = Instant::now() + Duration::from_secs(10);
        m.heartbeat_at(0, later).unwrap();
        assert_eq!(m.check_liveness_at(later, Duration::from_secs(5)), vec![1]);
        assert_eq!(m.watermark().get(), 4);
        m.commit(1, 5).unwrap();
        m.commit(1, 6).unwrap();
        assert_eq!(m.watermark().get(), 6);
        assert!(m.units().iter().all(|u| !u.stalled));
    }

    #[test]
    fn pipeline_commits_and_reports() {
        let store = MemoryStore::new().shared();
        let grids = GridSet::new(vec![
            grid(),
            PartitionGrid::with_shape(1, (1.0, 0.0), 1.0, 2, 2).unwrap(),
        ]);
        let p = Pipeline::new(store.clone(), grids, IngestConfig::default()).unwrap();
        assert_eq!(store.scan_prefix("meta:").unwrap().len(), 8);
        let mut b1 = batch(1, &["b"]);
        b1.unit = 1;
        for r in &mut b1.catalog {
            r.oid = format!("u1{}", r.oid);
            r.x += 1.0;
        }
        b1.eset.oids = vec!["u1b".into()];
        let report = p.process(&[batch(1, &["a"]), b1]);
        assert!(report.failures.is_empty());
        assert_eq!(report.watermark, 1);
        assert_eq!(report.new_events, 2);
        let bad = batch(3, &[]);
        let report = p.process(&[bad]);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.watermark, 1);
    }
}
