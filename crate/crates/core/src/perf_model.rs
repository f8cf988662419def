//! Latency prediction for a cluster of `K` nodes.
//!
//! Insertion latency at `K` is the single-worker latency on `1/K` of the
//! data. Query latency at `K` is the single-node parallel time on `1/K` of
//! the data plus a scale overhead `theta1 * K + theta2`, fitted on a few
//! small cluster sizes.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use serde::Serialize;

use crate::datagen::{unit_origin, GenConfig, Generator};
use crate::domain::{Cycle, TimeInterval};
use crate::epgrid::{GridSet, PartitionGrid, Pid};
use crate::error::ModelError;
use crate::ingest::{CycleBatch, IngestConfig, Pipeline, Worker};
use crate::query::QueryEngine;
use crate::storage::MemoryStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingPoint {
    pub kprime: u32,
    /// Observed overhead at `kprime` nodes, in seconds.
    pub fo: f64,
}

fn distinct_sizes(points: &[TrainingPoint]) -> usize {
    points.iter().map(|p| p.kprime).collect::<HashSet<_>>().len()
}

/// Ordinary least squares for `fo = theta1 * K + theta2`.
pub fn fit_overhead(points: &[TrainingPoint]) -> Result<(f64, f64), ModelError> {
    if distinct_sizes(points) < 2 || points.iter().any(|p| p.kprime == 0) {
        return Err(ModelError::Degenerate);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| f64::from(p.kprime)).sum::<f64>() / n;
    let my = points.iter().map(|p| p.fo).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for p in points {
        let dx = f64::from(p.kprime) - mx;
        sxy += dx * (p.fo - my);
        sxx += dx * dx;
    }
    let theta1 = sxy / sxx;
    Ok((theta1, my - theta1 * mx))
}

/// Damped Gauss-Newton steps from `start`. For this linear model it settles
/// on the least-squares line; kept for fits that start from a prior guess.
pub fn refine_damped(
    points: &[TrainingPoint],
    start: (f64, f64),
    lambda: f64,
    iters: usize,
) -> Result<(f64, f64), ModelError> {
    if distinct_sizes(points) < 2 {
        return Err(ModelError::Degenerate);
    }
    let (mut a, mut b) = start;
    let (mut skk, mut sk, n) = (0.0, 0.0, points.len() as f64);
    for p in points {
        let k = f64::from(p.kprime);
        skk += k * k;
        sk += k;
    }
    // normal matrix [[skk, sk], [sk, n]] with its diagonal scaled up
    let (m11, m12, m22) = (skk * (1.0 + lambda), sk, n * (1.0 + lambda));
    let det = m11 * m22 - m12 * m12;
    for _ in 0..iters {
        let (mut g1, mut g2) = (0.0, 0.0);
        for p in points {
            let k = f64::from(p.kprime);
            let r = p.fo - (a * k + b);
            g1 += k * r;
            g2 += r;
        }
        let da = (m22 * g1 - m12 * g2) / det;
        let db = (m11 * g2 - m12 * g1) / det;
        a += da;
        b += db;
        if da.abs() < 1e-15 && db.abs() < 1e-15 {
            break;
        }
    }
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    /// Single-worker insertion latency on `1/K` of the data.
    pub fp_fs: f64,
    /// Single-node query parallel time on `1/K` of the data.
    pub fr_fq: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub ct: f64,
    pub k: u32,
}

pub fn predict_query_latency(model: &LatencyModel) -> f64 {
    model.fr_fq + model.theta1 * f64::from(model.k) + model.theta2
}

/// Predicted insertion latency and whether it fits within the cycle.
pub fn predict_insert_latency(fp_fs: f64, ct: f64) -> (f64, bool) {
    (fp_fs, fp_fs <= ct)
}

pub fn prediction_accuracy(te: f64, ta: f64) -> Result<f64, ModelError> {
    if ta.is_nan() || ta <= 0.0 {
        return Err(ModelError::NonPositiveActual(ta));
    }
    Ok((1.0 - (te - ta).abs() / ta).max(0.0))
}

/// Training rows for one workload.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkloadTraining {
    /// Single-node parallel time on `1/K` of the data.
    pub base: Option<f64>,
    /// Measured latency at the target size, if known.
    pub actual: Option<f64>,
    /// Measured latency per small cluster size.
    pub runs: Vec<(u32, f64)>,
}

impl WorkloadTraining {
    pub fn points(&self) -> Result<Vec<TrainingPoint>, ModelError> {
        let base = self
            .base
            .ok_or_else(|| ModelError::Training("missing base row".into()))?;
        Ok(self
            .runs
            .iter()
            .map(|&(kprime, latency)| TrainingPoint {
                kprime,
                fo: latency - base,
            })
            .collect())
    }
}

/// Parse tab- or comma-separated `workload, kprime, latency` rows. The
/// `kprime` column is a cluster size, `base` for the single-node parallel
/// time, or `actual` for a measured latency at the target size. Lines
/// starting with `#` and a `workload` header are skipped.
pub fn parse_training(text: &str) -> Result<BTreeMap<String, WorkloadTraining>, ModelError> {
    let mut out: BTreeMap<String, WorkloadTraining> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(['\t', ','])
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .collect();
        if fields.first() == Some(&"workload") {
            continue;
        }
        let bad = |why: &str| ModelError::Training(format!("line {}: {why}", n + 1));
        let [workload, kind, latency] = fields[..] else {
            return Err(bad("expected workload, kprime, latency"));
        };
        let latency: f64 = latency.parse().map_err(|_| bad("latency is not a number"))?;
        if !latency.is_finite() || latency < 0.0 {
            return Err(bad("latency must be a non-negative number"));
        }
        let entry = out.entry(workload.to_string()).or_default();
        match kind {
            "base" => entry.base = Some(latency),
            "actual" => entry.actual = Some(latency),
            k => {
                let k: u32 = k.parse().map_err(|_| bad("kprime must be base, actual, or a size"))?;
                if k == 0 {
                    return Err(bad("kprime must be at least 1"));
                }
                entry.runs.push((k, latency));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub workload: String,
    pub k: u32,
    pub theta1: f64,
    pub theta2: f64,
    pub te: f64,
    pub ta: Option<f64>,
    pub acc_p: Option<f64>,
    /// Whether the prediction fits within the cycle.
    pub within_ct: bool,
}

/// Fit and predict every workload in a training table.
pub fn report(
    table: &BTreeMap<String, WorkloadTraining>,
    k: u32,
    ct: f64,
) -> Result<Vec<ModelReport>, ModelError> {
    table
        .iter()
        .map(|(name, w)| {
            let (theta1, theta2) = fit_overhead(&w.points()?)?;
            let model = LatencyModel {
                fp_fs: 0.0,
                fr_fq: w.base.unwrap_or(0.0),
                theta1,
                theta2,
                ct,
                k,
            };
            let te = predict_query_latency(&model);
            Ok(ModelReport {
                workload: name.clone(),
                k,
                theta1,
                theta2,
                te,
                ta: w.actual,
                acc_p: w.actual.map(|ta| prediction_accuracy(te, ta)).transpose()?,
                within_ct: te <= ct,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Workload {
    Insert,
    Probe,
    List,
    Stretch,
}

impl std::str::FromStr for Workload {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "insert" => Ok(Self::Insert),
            "probe" | "probing" => Ok(Self::Probe),
            "list" | "listing" => Ok(Self::List),
            "stretch" | "stretching" => Ok(Self::Stretch),
            other => Err(ModelError::Setup(format!("unknown workload {other:?}"))),
        }
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureSpec {
    /// Night to generate; should already be `1/K` of the full volume.
    pub gen: GenConfig,
    /// Partitions per unit.
    pub cells: u64,
    /// Queries read partitions whose cell id is `0 mod modulus`.
    pub modulus: u32,
    pub interval: TimeInterval,
    pub reps: usize,
}

/// A generated night kept in memory and staged in a store for repeated
/// timing runs.
pub struct Bench {
    spec: MeasureSpec,
    grids: GridSet,
    night: Vec<Vec<CycleBatch>>,
    engine: QueryEngine,
    subset: Vec<Pid>,
}

impl Bench {
    pub fn new(spec: MeasureSpec) -> Result<Self, ModelError> {
        let setup = |e: &dyn std::fmt::Display| ModelError::Setup(e.to_string());
        if spec.reps == 0 || spec.modulus == 0 {
            return Err(ModelError::Setup("reps and modulus must be positive".into()));
        }
        let mut gen = Generator::new(spec.gen.clone()).map_err(|e| setup(&e))?;
        let grids = GridSet::new(
            (0..spec.gen.units)
                .map(|u| {
                    PartitionGrid::with_cell_count(
                        u,
                        unit_origin(u, spec.gen.side),
                        spec.gen.side,
                        spec.cells,
                    )
                })
                .collect::<Result<_, _>>()
                .map_err(|e| setup(&e))?,
        );
        let night: Vec<Vec<CycleBatch>> = (0..spec.gen.cycles).map(|_| gen.next_cycle()).collect();

        let store = MemoryStore::new().shared();
        let pipeline =
            Pipeline::new(store.clone(), grids.clone(), IngestConfig::default()).map_err(|e| setup(&e))?;
        for batches in &night {
            let report = pipeline.process(batches);
            if let Some(f) = report.failures.first() {
                return Err(ModelError::Setup(f.error.clone()));
            }
        }
        let engine = QueryEngine::new(store, grids.clone(), pipeline.watermark());
        let subset = grids
            .all_pids()
            .into_iter()
            .filter(|p| p.cell % spec.modulus == 0)
            .collect();
        Ok(Self {
            spec,
            grids,
            night,
            engine,
            subset,
        })
    }

    pub fn engine(&self) -> &QueryEngine {
        &self.engine
    }

    pub fn subset(&self) -> &[Pid] {
        &self.subset
    }

    pub fn cycles(&self) -> Cycle {
        self.night.len() as Cycle
    }

    /// Median wall time over the configured repetitions. Insertion reports
    /// the mean per-cycle latency of one worker on a fresh store.
    pub fn measure(&self, workload: Workload) -> Result<f64, ModelError> {
        let mut samples = Vec::with_capacity(self.spec.reps);
        for _ in 0..self.spec.reps {
            samples.push(self.run_once(workload)?);
        }
        Ok(median(&mut samples))
    }

    fn run_once(&self, workload: Workload) -> Result<f64, ModelError> {
        let q = |e: crate::error::QueryError| ModelError::Setup(e.to_string());
        let iv = self.spec.interval;
        match workload {
            Workload::Insert => {
                let grid = self.grids.grids()[0].clone();
                let mut worker = Worker::new(grid, MemoryStore::new().shared(), IngestConfig::default());
                let mut total = 0.0;
                for batches in &self.night {
                    let stats = worker
                        .process_cycle(&batches[0])
                        .map_err(|e| ModelError::Setup(e.to_string()))?;
                    total += stats.latency_secs;
                }
                Ok(total / self.night.len().max(1) as f64)
            }
            Workload::Probe => {
                let started = Instant::now();
                self.engine.probe_pids(&self.subset, iv).map_err(q)?;
                Ok(started.elapsed().as_secs_f64())
            }
            Workload::List => {
                let set: HashSet<Pid> = self.subset.iter().copied().collect();
                let started = Instant::now();
                self.engine.list_in(Some(&set), iv).map_err(q)?;
                Ok(started.elapsed().as_secs_f64())
            }
            Workload::Stretch => {
                let set: HashSet<Pid> = self.subset.iter().copied().collect();
                let listed = self.engine.list_in(Some(&set), iv).map_err(q)?;
                let Some(first) = listed.first() else {
                    return Err(ModelError::Setup("no event to stretch in the interval".into()));
                };
                let started = Instant::now();
                self.engine.stretch(&first.event.eid, 1, 1).map_err(q)?;
                Ok(started.elapsed().as_secs_f64())
            }
        }
    }
}

/// Stage a night per `spec` and time one workload on it.
pub fn measure_parallel_time(workload: Workload, spec: &MeasureSpec) -> Result<f64, ModelError> {
    Bench::new(spec.clone())?.measure(workload)
}
