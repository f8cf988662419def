//! Generator-driven ingestion loop with pause, resume, and speed steering.

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use tokio::sync::broadcast;

use aserv_core::datagen::Generator;
use aserv_core::ingest::CycleReport;
use aserv_core::{Cycle, Pipeline};

use crate::queries::ApiError;

const MAX_REPLAYS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionDelta {
    pub pid: String,
    pub total: u32,
    pub new: u32,
}

/// One committed cycle, as pushed to stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleEvent {
    pub t: Cycle,
    pub watermark: Cycle,
    pub latency_secs: f64,
    pub new_events: usize,
    pub active_events: usize,
    pub deltas: Vec<PartitionDelta>,
}

impl CycleEvent {
    pub fn from_report(report: &CycleReport) -> Self {
        Self {
            t: report.t,
            watermark: report.watermark,
            latency_secs: report.latency_secs,
            new_events: report.new_events,
            active_events: report.active_events,
            deltas: report
                .stats
                .iter()
                .flat_map(|s| &s.icrs)
                .map(|i| PartitionDelta {
                    pid: i.pid.to_string(),
                    total: i.total,
                    new: i.new,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimStatus {
    pub running: bool,
    pub paused: bool,
    /// Speed multiplier: one cycle every `ct / rate` seconds.
    pub rate: f64,
    pub cycle: Cycle,
    pub target: Cycle,
}

#[derive(Debug)]
struct State {
    status: SimStatus,
    in_cycle: bool,
    stop: bool,
}

#[derive(Debug)]
pub struct SimControl {
    state: Mutex<State>,
    cv: Condvar,
}

impl SimControl {
    fn new(target: Cycle) -> Self {
        Self {
            state: Mutex::new(State {
                status: SimStatus {
                    running: target > 0,
                    paused: false,
                    rate: 1.0,
                    cycle: 0,
                    target,
                },
                in_cycle: false,
                stop: false,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn status(&self) -> SimStatus {
        self.state.lock().status
    }

    fn stopped() -> ApiError {
        ApiError::Conflict("simulation is not running".into())
    }

    /// Returns once no cycle is in flight, so the watermark stays put.
    pub fn pause(&self) -> Result<SimStatus, ApiError> {
        let mut st = self.state.lock();
        if !st.status.running {
            return Err(Self::stopped());
        }
        st.status.paused = true;
        while st.in_cycle {
            self.cv.wait(&mut st);
        }
        Ok(st.status)
    }

    pub fn resume(&self) -> Result<SimStatus, ApiError> {
        let mut st = self.state.lock();
        if !st.status.running {
            return Err(Self::stopped());
        }
        st.status.paused = false;
        self.cv.notify_all();
        Ok(st.status)
    }

    pub fn set_rate(&self, rate: f64) -> Result<SimStatus, ApiError> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(ApiError::BadRequest(format!("rate must be positive, got {rate}")));
        }
        let mut st = self.state.lock();
        if !st.status.running {
            return Err(Self::stopped());
        }
        st.status.rate = rate;
        self.cv.notify_all();
        Ok(st.status)
    }

    pub fn stop(&self) {
        let mut st = self.state.lock();
        st.stop = true;
        self.cv.notify_all();
    }

    /// Block while paused; false once asked to stop.
    fn begin_cycle(&self) -> bool {
        let mut st = self.state.lock();
        while st.status.paused && !st.stop {
            self.cv.wait(&mut st);
        }
        if st.stop {
            return false;
        }
        st.in_cycle = true;
        true
    }

    fn end_cycle(&self, t: Cycle) {
        let mut st = self.state.lock();
        st.in_cycle = false;
        st.status.cycle = t;
        self.cv.notify_all();
    }

    /// Sleep until `deadline(rate)`, waking early on steering or stop.
    fn pace(&self, started: Instant, ct: f64) {
        let mut st = self.state.lock();
        loop {
            if st.stop {
                return;
            }
            let wait = Duration::from_secs_f64(ct / st.status.rate);
            let Some(left) = (started + wait).checked_duration_since(Instant::now()) else {
                return;
            };
            self.cv.wait_for(&mut st, left);
        }
    }

    fn finish(&self) {
        let mut st = self.state.lock();
        st.status.running = false;
        st.in_cycle = false;
        self.cv.notify_all();
    }
}

pub struct Simulation {
    control: Arc<SimControl>,
    handle: Option<JoinHandle<anyhow::Result<()>>>,
}

impl Simulation {
    /// Run `cycles` cycles of `gen` through `pipeline`, one every `ct`
    /// seconds at rate 1. Each committed cycle goes to `events`.
    pub fn spawn(
        mut gen: Generator,
        pipeline: Arc<Pipeline>,
        ct: f64,
        cycles: Cycle,
        events: broadcast::Sender<CycleEvent>,
    ) -> Self {
        let control = Arc::new(SimControl::new(cycles));
        let ctl = control.clone();
        let handle = thread::spawn(move || {
            let result = (|| {
                for _ in 0..cycles {
                    if !ctl.begin_cycle() {
                        break;
                    }
                    let started = Instant::now();
                    let batches = gen.next_cycle();
                    let t = batches.first().map_or(0, |b| b.t);
                    let mut report = pipeline.process(&batches);
                    let mut replays = 0;
                    while !report.failures.is_empty() {
                        replays += 1;
                        if replays > MAX_REPLAYS {
                            ctl.end_cycle(t.saturating_sub(1));
                            anyhow::bail!("cycle {t} failed: {:?}", report.failures);
                        }
                        thread::sleep(Duration::from_millis(50 * u64::from(replays)));
                        let failed: Vec<_> = batches
                            .iter()
                            .filter(|b| report.failures.iter().any(|f| f.unit == b.unit))
                            .cloned()
                            .collect();
                        let retry = pipeline.process(&failed);
                        report.failures = retry.failures;
                        report.stats.extend(retry.stats);
                        report.watermark = retry.watermark;
                    }
                    ctl.end_cycle(t);
                    log::info!(
                        "cycle {t}: watermark {}, {} new events, {:.3}s",
                        report.watermark,
                        report.new_events,
                        report.latency_secs
                    );
                    if report.watermark >= t {
                        // no subscribers is fine
                        let _ = events.send(CycleEvent::from_report(&report));
                    }
                    ctl.pace(started, ct);
                }
                Ok(())
            })();
            ctl.finish();
            if let Err(e) = &result {
                log::error!("simulation stopped: {e:#}");
            }
            result
        });
        Self {
            control,
            handle: Some(handle),
        }
    }

    pub fn control(&self) -> Arc<SimControl> {
        self.control.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.handle.as_ref().is_none_or(JoinHandle::is_finished)
    }

    pub fn join(mut self) -> anyhow::Result<()> {
        match self.handle.take() {
            Some(h) => h.join().map_err(|_| anyhow::anyhow!("simulation thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for Simulation {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            self.control.stop();
            let _ = h.join();
        }
    }
}
