//! Simulated observation units.
//!
//! Each unit watches a square sub-area with a fixed set of objects. Per cycle
//! it emits one catalog row per object and the Eset of objects inside an
//! event. New events per cycle follow a geometric law on {0, 1, ...}; their
//! durations are uniform integers. The generator keeps the ground truth so
//! tests can check everything downstream against it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::domain::{CatalogTuple, Cycle, Eset};
use crate::error::IngestError;
use crate::ingest::files;
use crate::ingest::CycleBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub units: u32,
    pub objects_per_unit: usize,
    pub cycles: Cycle,
    /// Side length of each unit's square sub-area.
    pub side: f64,
    /// Cycle length in seconds.
    pub ct: f64,
    /// Success probability of the geometric draw for new events per cycle.
    pub p: f64,
    pub dmin: Cycle,
    pub dmax: Cycle,
    /// Data attributes per row after oid, x, y, t.
    pub m: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            units: 2,
            objects_per_unit: 10_000,
            cycles: 200,
            side: 1.0,
            ct: 1.0,
            p: 0.2,
            dmin: 1,
            dmax: 10,
            m: 21,
            seed: 42,
        }
    }
}

impl GenConfig {
    /// Night-scale profile: 175,600 objects per unit, 15 s cycles, 1,920
    /// cycles, and `p` tuned so all units together start about 200,000 events.
    pub fn gwac_profile(units: u32) -> Self {
        let cycles = 1920;
        let per_cycle = 200_000.0 / (cycles as f64 * f64::from(units.max(1)));
        Self {
            units,
            objects_per_unit: 175_600,
            cycles,
            side: 1.0,
            ct: 15.0,
            p: p_for_mean(per_cycle),
            dmin: 1,
            dmax: 40,
            m: 21,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(format!("p must be in (0, 1], got {}", self.p));
        }
        if self.dmin < 1 || self.dmax < self.dmin {
            return Err(format!("bad duration range [{}, {}]", self.dmin, self.dmax));
        }
        if !(self.side.is_finite() && self.side > 0.0) {
            return Err(format!("side must be positive, got {}", self.side));
        }
        if !(self.ct.is_finite() && self.ct > 0.0) {
            return Err(format!("ct must be positive, got {}", self.ct));
        }
        if self.m == 0 {
            return Err("m must be at least 1".into());
        }
        Ok(())
    }

    /// Mean new events per cycle per unit.
    pub fn mean_arrivals(&self) -> f64 {
        (1.0 - self.p) / self.p
    }
}

/// Geometric parameter whose mean on {0, 1, ...} is `mean`.
pub fn p_for_mean(mean: f64) -> f64 {
    1.0 / (1.0 + mean.max(0.0))
}

/// Lower-left corner of a unit's sub-area. Units sit side by side along x.
pub fn unit_origin(unit: u32, side: f64) -> (f64, f64) {
    (f64::from(unit) * side, 0.0)
}

pub fn object_id(unit: u32, index: usize) -> String {
    format!("u{unit}o{index}")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn round_to(v: f64, scale: f64) -> f64 {
    (v * scale).round() / scale
}

/// One generated event with its object's position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub unit: u32,
    pub oid: String,
    pub stime: Cycle,
    pub etime: Cycle,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroundTruth {
    pub events: Vec<TruthEvent>,
}

impl GroundTruth {
    /// Events started by `t`, with end times cut at `t`.
    pub fn events_until(&self, t: Cycle) -> Vec<TruthEvent> {
        self.events
            .iter()
            .filter(|e| e.stime <= t)
            .map(|e| TruthEvent {
                etime: e.etime.min(t),
                ..e.clone()
            })
            .collect()
    }

    /// Header plus one `unit,oid,stime,etime,x,y` line per event.
    pub fn export(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "unit,oid,stime,etime,x,y")?;
        for e in &self.events {
            writeln!(w, "{},{},{},{},{},{}", e.unit, e.oid, e.stime, e.etime, e.x, e.y)?;
        }
        Ok(())
    }
}

/// Read `x,y` lines, one per object, to replace uniform placement.
pub fn load_positions(path: &Path) -> Result<Vec<(f64, f64)>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |why: String| IngestError::BadFile {
        path: path.display().to_string(),
        why,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: expected x,y", n + 1)))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("line {}: {e}", n + 1)))
        };
        out.push((parse(x)?, parse(y)?));
    }
    Ok(out)
}

pub struct UnitGenerator {
    unit: u32,
    cfg: GenConfig,
    rng: ChaCha8Rng,
    arrivals: Geometric,
    oids: Vec<String>,
    positions: Vec<(f64, f64)>,
    /// Current event per object as (stime, etime).
    active: Vec<Option<(Cycle, Cycle)>>,
    /// Last cycle of each object's previous event.
    last_end: Vec<Option<Cycle>>,
    t: Cycle,
    truth: Vec<TruthEvent>,
}

impl UnitGenerator {
    pub fn new(cfg: &GenConfig, unit: u32) -> Self {
        let mut rng = Self::rng_for(cfg.seed, unit);
        let (ox, oy) = unit_origin(unit, cfg.side);
        let positions = (0..cfg.objects_per_unit)
            .map(|_| {
                (
                    round_to(ox + rng.random::<f64>() * cfg.side, 1e7),
                    round_to(oy + rng.random::<f64>() * cfg.side, 1e7),
                )
            })
            .collect();
        Self::build(cfg, unit, rng, positions)
    }

    /// Use given object positions instead of uniform placement.
    pub fn with_positions(cfg: &GenConfig, unit: u32, positions: Vec<(f64, f64)>) -> Self {
        let rng = Self::rng_for(cfg.seed, unit);
        Self::build(cfg, unit, rng, positions)
    }

    fn rng_for(seed: u64, unit: u32) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ splitmix64(u64::from(unit) + 1))
    }

    fn build(cfg: &GenConfig, unit: u32, rng: ChaCha8Rng, positions: Vec<(f64, f64)>) -> Self {
        let n = positions.len();
        Self {
            unit,
            cfg: cfg.clone(),
            rng,
            arrivals: Geometric::new(cfg.p).expect("p validated in (0, 1]"),
            oids: (0..n).map(|i| object_id(unit, i)).collect(),
            positions,
            active: vec![None; n],
            last_end: vec![None; n],
            t: 0,
            truth: Vec::new(),
        }
    }

    pub fn unit(&self) -> u32 {
        self.unit
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn truth(&self) -> &[TruthEvent] {
        &self.truth
    }

    pub fn last_cycle(&self) -> Cycle {
        self.t
    }

    /// Produce cycle `last + 1`.
    pub fn next_cycle(&mut self) -> CycleBatch {
        let t = self.t + 1;
        self.t = t;

        for (slot, end) in self.active.iter_mut().zip(self.last_end.iter_mut()) {
            if let Some((_, etime)) = *slot {
                if etime < t {
                    *slot = None;
                    *end = Some(etime);
                }
            }
        }

        // an object just out of an event waits a cycle so runs stay separate
        let eligible: Vec<usize> = (0..self.oids.len())
            .filter(|&i| self.active[i].is_none() && self.last_end[i] != Some(t - 1))
            .collect();
        let wanted = self.arrivals.sample(&mut self.rng) as usize;
        let k = wanted.min(eligible.len());
        let mut picked: Vec<usize> = index::sample(&mut self.rng, eligible.len(), k)
            .into_iter()
            .map(|j| eligible[j])
            .collect();
        picked.sort_unstable();
        for i in picked {
            let d = self.rng.random_range(self.cfg.dmin..=self.cfg.dmax);
            let etime = t + d - 1;
            self.active[i] = Some((t, etime));
            let (x, y) = self.positions[i];
            self.truth.push(TruthEvent {
                unit: self.unit,
                oid: self.oids[i].clone(),
                stime: t,
                etime,
                x,
                y,
            });
        }

        let mut catalog = Vec::with_capacity(self.oids.len());
        for (oid, &(x, y)) in self.oids.iter().zip(&self.positions) {
            let d = (0..self.cfg.m)
                .map(|_| f64::from(self.rng.random_range(0..200_000u32)) / 1e4)
                .collect();
            catalog.push(CatalogTuple::new(oid.clone(), x, y, t, d));
        }
        let oids = self
            .active
            .iter()
            .zip(&self.oids)
            .filter(|(slot, _)| slot.is_some())
            .map(|(_, oid)| oid.clone())
            .collect();
        CycleBatch {
            unit: self.unit,
            t,
            catalog,
            eset: Eset::new(t, oids),
        }
    }
}

/// All units of one simulated survey, stepped in lockstep.
pub struct Generator {
    cfg: GenConfig,
    units: Vec<UnitGenerator>,
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Result<Self, String> {
        cfg.validate()?;
        let units = (0..cfg.units).map(|u| UnitGenerator::new(&cfg, u)).collect();
        Ok(Self { cfg, units })
    }

    pub fn from_units(cfg: GenConfig, units: Vec<UnitGenerator>) -> Self {
        Self { cfg, units }
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn units(&self) -> &[UnitGenerator] {
        &self.units
    }

    pub fn last_cycle(&self) -> Cycle {
        self.units.first().map_or(0, UnitGenerator::last_cycle)
    }

    /// One batch per unit for the next cycle.
    pub fn next_cycle(&mut self) -> Vec<CycleBatch> {
        self.units.iter_mut().map(UnitGenerator::next_cycle).collect()
    }

    pub fn truth(&self) -> GroundTruth {
        let mut events: Vec<TruthEvent> =
            self.units.iter().flat_map(|u| u.truth().iter().cloned()).collect();
        events.sort_by(|a, b| (a.unit, &a.oid, a.stime).cmp(&(b.unit, &b.oid, b.stime)));
        GroundTruth { events }
    }

    /// Generate the next cycle and write its files under `dir`.
    pub fn emit_files(&mut self, dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, IngestError> {
        self.next_cycle()
            .iter()
            .map(|b| files::write_cycle(dir, b))
            .collect()
    }
}
