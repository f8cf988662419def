//! Command bodies behind the CLI, kept out of `main` so tests can call them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::sync::broadcast;

use aserv_core::datagen::{GenConfig, Generator};
use aserv_core::ingest::files;
use aserv_core::perf_model::{self, predict_insert_latency, Bench, MeasureSpec, Workload};
use aserv_core::query::QueryEngine;
use aserv_core::{fixture, GridSet, MemoryStore, Pipeline, Region, TimeInterval};

use crate::api::{router, AppState};
use crate::config::Config;
use crate::queries::{execute, ApiError, QueryRequest};
use crate::sim::Simulation;

pub const GRIDS_FILE: &str = "grids.json";
pub const TRUTH_FILE: &str = "truth.csv";

fn write_grids(dir: &Path, grids: &GridSet) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(GRIDS_FILE);
    fs::write(&path, serde_json::to_string_pretty(grids)?).with_context(|| format!("writing {}", path.display()))
}

/// Write catalogs and Esets for every cycle, plus the grid layout and the
/// ground truth. Returns the number of cycles written.
pub fn generate(cfg: &Config, dir: &Path, cycles: Option<u64>, use_fixture: bool) -> anyhow::Result<u64> {
    if use_fixture {
        for t in 1..=fixture::CYCLES {
            files::write_cycle(dir, &fixture::cycle(t))?;
        }
        write_grids(dir, &fixture::grids())?;
        return Ok(fixture::CYCLES);
    }
    let cycles = cycles.unwrap_or(cfg.gen.cycles);
    let mut gen = Generator::new(cfg.gen.clone()).map_err(anyhow::Error::msg)?;
    for _ in 0..cycles {
        gen.emit_files(dir)?;
    }
    write_grids(dir, &cfg.grids()?)?;
    let mut w = BufWriter::new(File::create(dir.join(TRUTH_FILE))?);
    gen.truth().export(&mut w)?;
    w.flush()?;
    Ok(cycles)
}

/// Ingest every cycle found under `dir` into a fresh in-memory store.
pub fn ingest_dir(cfg: &Config, dir: &Path) -> anyhow::Result<(Pipeline, QueryEngine)> {
    let grids_path = dir.join(GRIDS_FILE);
    let grids = if grids_path.exists() {
        let text = fs::read_to_string(&grids_path)?;
        let loaded: GridSet = serde_json::from_str(&text).with_context(|| format!("parsing {}", grids_path.display()))?;
        GridSet::new(loaded.grids().to_vec())
    } else {
        cfg.grids()?
    };
    let found = files::discover(dir)?;
    if found.is_empty() {
        bail!("no cycle files under {}", dir.display());
    }
    let pipeline = Pipeline::new(MemoryStore::new().shared(), grids.clone(), cfg.ingest())?;
    let mut by_cycle: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (unit, cycles) in &found {
        for &t in cycles {
            by_cycle.entry(t).or_default().push(*unit);
        }
    }
    for (t, units) in by_cycle {
        let batches = units
            .iter()
            .map(|&u| files::load_cycle(dir, u, t))
            .collect::<Result<Vec<_>, _>>()?;
        let report = pipeline.process(&batches);
        if let Some(f) = report.failures.first() {
            bail!("unit {} cycle {}: {}", f.unit, f.t, f.error);
        }
    }
    let engine = QueryEngine::new(pipeline.store().clone(), grids, pipeline.watermark());
    Ok((pipeline, engine))
}

/// Where a query runs.
pub enum Target<'a> {
    Url(&'a str),
    DataDir(&'a Path),
}

/// Run one query and return its JSON body.
pub fn query(cfg: &Config, target: Target<'_>, req: &QueryRequest) -> anyhow::Result<String> {
    match target {
        Target::Url(base) => {
            let url = format!("{}/{}", base.trim_end_matches('/'), req.kind());
            let resp = reqwest::blocking::Client::new()
                .get(&url)
                .query(&req.params())
                .send()
                .with_context(|| format!("requesting {url}"))?;
            let status = resp.status();
            let body = resp.text()?;
            if !status.is_success() {
                bail!("{status}: {body}");
            }
            Ok(body)
        }
        Target::DataDir(dir) => {
            let (_, engine) = ingest_dir(cfg, dir)?;
            execute(&engine, req).map_err(|e: ApiError| anyhow::anyhow!("{}: {}", e.status(), e))
        }
    }
}

/// Fit every workload in a training table and format one line each.
pub fn fit(training: &Path, k: u32, ct: f64) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(training).with_context(|| format!("reading {}", training.display()))?;
    let table = perf_model::parse_training(&text)?;
    let reports = perf_model::report(&table, k, ct)?;
    Ok(reports
        .iter()
        .map(|r| {
            let mut line = format!(
                "{} K={} theta1={:.4} theta2={:.4} T_e={:.3}",
                r.workload, r.k, r.theta1, r.theta2, r.te
            );
            if let (Some(ta), Some(acc)) = (r.ta, r.acc_p) {
                line.push_str(&format!(" T_a={ta:.3} acc_p={acc:.3}"));
            }
            line.push_str(&format!(" within_ct={}", r.within_ct));
            line
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct Measured {
    pub k: u32,
    pub fp_fs: f64,
    pub insert_within_ct: bool,
    pub probe: f64,
    pub list: f64,
    pub stretch: f64,
}

/// Time each workload on `1/k` of the configured night, read through the
/// partitions whose id is `0 mod k`.
pub fn measure(cfg: &Config, k: u32, reps: usize) -> anyhow::Result<Measured> {
    let gen = GenConfig {
        units: 1,
        objects_per_unit: (cfg.gen.objects_per_unit / k.max(1) as usize).max(1),
        ..cfg.gen.clone()
    };
    let cycles = gen.cycles.max(1);
    let bench = Bench::new(MeasureSpec {
        gen,
        cells: cfg.cells_per_unit()?,
        modulus: k,
        interval: TimeInterval::new(1, cycles)?,
        reps,
    })?;
    let fp_fs = bench.measure(Workload::Insert)?;
    Ok(Measured {
        k,
        fp_fs,
        insert_within_ct: predict_insert_latency(fp_fs, cfg.gen.ct).1,
        probe: bench.measure(Workload::Probe)?,
        list: bench.measure(Workload::List)?,
        stretch: bench.measure(Workload::Stretch)?,
    })
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub cycles: u64,
    pub watermark: u64,
    pub events: usize,
    pub key_count: u64,
    pub mean_latency_secs: f64,
    pub max_latency_secs: f64,
    pub within_ct: bool,
    pub valid_to_raw: f64,
    pub queries: usize,
    pub overcount_violations: usize,
    pub min_accuracy: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

/// Ingest a whole night unpaced, then measure probe accuracy on random
/// disks of radius between `r_min` and `2 r_min`.
pub fn report(cfg: &Config, queries: usize, seed: u64) -> anyhow::Result<Report> {
    let grids = cfg.grids()?;
    let pipeline = Pipeline::new(cfg.open_store()?, grids.clone(), cfg.ingest())?;
    let mut gen = Generator::new(cfg.gen.clone()).map_err(anyhow::Error::msg)?;
    let (mut lat_sum, mut lat_max, mut n, mut valid, mut raw) = (0.0, 0.0f64, 0usize, 0u64, 0u64);
    for _ in 0..cfg.gen.cycles {
        let r = pipeline.process(&gen.next_cycle());
        if let Some(f) = r.failures.first() {
            bail!("unit {} cycle {}: {}", f.unit, f.t, f.error);
        }
        for s in &r.stats {
            lat_sum += s.latency_secs;
            lat_max = lat_max.max(s.latency_secs);
            n += 1;
            valid += s.valid_bytes;
            raw += s.raw_bytes;
        }
    }
    let truth = gen.truth();
    let engine = QueryEngine::new(pipeline.store().clone(), grids, pipeline.watermark());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r0 = cfg.r_min();
    let side = cfg.gen.side;
    let mut ratios = Vec::new();
    let mut violations = 0;
    if cfg.gen.cycles > 0 && 2.0 * r0 < side {
        let iv = TimeInterval::new(1, cfg.gen.cycles)?;
        for _ in 0..queries {
            let r = rng.random_range(r0..(2.0 * r0).min(side / 2.0));
            let unit = rng.random_range(0..cfg.gen.units);
            let (ox, oy) = aserv_core::datagen::unit_origin(unit, side);
            let reg = Region::new(ox + rng.random_range(r..side - r), oy + rng.random_range(r..side - r), r)?;
            let probe = engine.probe(Some(&reg), iv)?;
            let pcse = truth.events.iter().filter(|e| reg.contains(e.x, e.y)).count() as u64;
            if probe < pcse {
                violations += 1;
            }
            if probe > 0 {
                ratios.push(pcse as f64 / probe as f64);
            }
        }
    }
    let mean_latency = if n > 0 { lat_sum / n as f64 } else { 0.0 };
    Ok(Report {
        cycles: cfg.gen.cycles,
        watermark: pipeline.watermark().get(),
        events: truth.events.len(),
        key_count: pipeline.store().key_count()?,
        mean_latency_secs: mean_latency,
        max_latency_secs: lat_max,
        within_ct: lat_max <= cfg.gen.ct,
        valid_to_raw: if raw > 0 { valid as f64 / raw as f64 } else { 0.0 },
        queries,
        overcount_violations: violations,
        min_accuracy: ratios.iter().copied().reduce(f64::min),
        mean_accuracy: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
    })
}

/// Serve the API while the simulation runs. Per-cycle summaries go to
/// `out`. Returns when the simulation ends, unless `linger` keeps the API
/// up until interrupted.
pub async fn run(cfg: Config, cycles: u64, linger: bool, mut out: impl Write + Send + 'static) -> anyhow::Result<()> {
    for w in cfg.warnings()? {
        log::warn!("{w}");
    }
    let grids = cfg.grids()?;
    let store = cfg.open_store()?;
    let pipeline = Arc::new(Pipeline::new(store.clone(), grids.clone(), cfg.ingest())?);
    let engine = Arc::new(QueryEngine::new(store, grids, pipeline.watermark()));
    let (tx, mut rx) = broadcast::channel(1024);
    let gen = Generator::new(cfg.gen.clone()).map_err(anyhow::Error::msg)?;
    let sim = Simulation::spawn(gen, pipeline.clone(), cfg.gen.ct, cycles, tx.clone());
    let state = AppState {
        engine,
        master: pipeline.master().clone(),
        sim: Some(sim.control()),
        events: tx,
    };

    let printer = tokio::spawn(async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let line = serde_json::json!({
                        "t": ev.t,
                        "watermark": ev.watermark,
                        "latency_secs": ev.latency_secs,
                        "new_events": ev.new_events,
                        "active_events": ev.active_events,
                    });
                    if writeln!(out, "{line}").is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
        let _ = out.flush();
    });

    let listener = tokio::net::TcpListener::bind(&cfg.bind)
        .await
        .with_context(|| format!("binding {}", cfg.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    let control = sim.control();
    let shutdown = async move {
        if linger {
            let _ = tokio::signal::ctrl_c().await;
            return;
        }
        loop {
            if !control.status().running {
                break;
            }
            tokio::select! {
                _ = tokio::time::sleep(Duration::from_millis(20)) => {}
                _ = tokio::signal::ctrl_c() => break,
            }
        }
    };
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || sim.join()).await??;
    printer.await?;
    Ok(())
}
