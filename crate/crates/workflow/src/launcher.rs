use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::apps::JobContext;
use crate::error::{Error, Result};
use crate::store::{now, JobState, JobStore, Outcome, PoolSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolPolicy {
    pub min_workers: usize,
    pub max_workers: usize,
    /// Grow while READY jobs exceed this many per worker.
    pub scale_up_backlog: f64,
    /// A worker idle this long retires, down to `min_workers`.
    pub scale_down_idle_s: f64,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self { min_workers: 1, max_workers: 4, scale_up_backlog: 2.0, scale_down_idle_s: 10.0 }
    }
}

impl PoolPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_workers < 1 || self.min_workers > self.max_workers {
            return Err(Error::Config(format!(
                "pool bounds must satisfy 1 <= min <= max, got {}..{}",
                self.min_workers, self.max_workers
            )));
        }
        if !(self.scale_up_backlog > 0.0) || !(self.scale_down_idle_s >= 0.0) {
            return Err(Error::Config("scale_up_backlog must be positive and scale_down_idle_s non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LauncherOptions {
    pub wall_limit_s: f64,
    /// Scheduling period.
    pub tick_s: f64,
    /// Stop once nothing is READY or RUNNING for this long.
    pub exit_when_idle_s: Option<f64>,
    /// Pool samples are persisted at most this often.
    pub persist_every_s: f64,
}

impl Default for LauncherOptions {
    fn default() -> Self {
        Self { wall_limit_s: 3600.0, tick_s: 0.05, exit_when_idle_s: None, persist_every_s: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub id: String,
    pub app: String,
    pub worker: String,
    pub outcome: JobState,
    pub wall_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    WallLimit,
    Idle,
    Requested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LauncherSummary {
    pub jobs: Vec<JobTiming>,
    pub timeline: Vec<PoolSample>,
    pub wall_s: f64,
    pub stop: StopReason,
    pub recovered: Vec<String>,
}

impl LauncherSummary {
    pub fn peak_workers(&self) -> usize {
        self.timeline.iter().map(|s| s.workers).max().unwrap_or(0)
    }
}

struct Shared {
    policy: PoolPolicy,
    tick: Duration,
    active: AtomicUsize,
    stop: Arc<AtomicBool>,
    timings: Mutex<Vec<JobTiming>>,
}

impl Shared {
    /// Claims a retirement slot unless the pool is already at its minimum.
    fn try_retire(&self) -> bool {
        self.active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n > self.policy.min_workers).then(|| n - 1))
            .is_ok()
    }
}

fn worker_loop(store: JobStore, id: String, shared: Arc<Shared>) -> Result<()> {
    store.register_worker(&id)?;
    let mut idle_since = Instant::now();
    while !shared.stop.load(Ordering::SeqCst) {
        let job = if store.paused()? { None } else { store.claim_next(&id)? };
        let Some(job) = job else {
            if idle_since.elapsed().as_secs_f64() >= shared.policy.scale_down_idle_s && shared.try_retire() {
                store.retire_worker(&id)?;
                return Ok(());
            }
            std::thread::sleep(shared.tick);
            continue;
        };
        let start = Instant::now();
        let result = match store.apps().get(&job.app).map(|a| a.entry.clone()) {
            None => Err(Error::UnknownApp(job.app.clone())),
            Some(entry) => {
                let _ = std::fs::create_dir_all(&job.workdir);
                let ctx = JobContext { job: &job, store: &store, workdir: &job.workdir };
                catch_unwind(AssertUnwindSafe(|| entry(&ctx)))
                    .unwrap_or_else(|_| Err(Error::Stage(format!("app {} panicked", job.app))))
            }
        };
        let (outcome, detail) = match &result {
            Ok(v) => (Outcome::Done, if v.is_null() { None } else { Some(v.to_string()) }),
            Err(e) => (Outcome::Failed, Some(e.to_string())),
        };
        let final_state = match store.complete(&job.id, &id, outcome, detail.as_deref()) {
            Ok(rec) => rec.state,
            // killed or lease-recovered while running; the result is dropped
            Err(Error::InvalidTransition { .. } | Error::NotOwner { .. }) => store.get(&job.id)?.state,
            Err(e) => return Err(e),
        };
        shared.timings.lock().unwrap_or_else(|e| e.into_inner()).push(JobTiming {
            id: job.id.clone(),
            app: job.app.clone(),
            worker: id.clone(),
            outcome: final_state,
            wall_s: start.elapsed().as_secs_f64(),
        });
        idle_since = Instant::now();
    }
    store.retire_worker(&id)?;
    Ok(())
}

/// Runs an elastic worker pool over `store` until the wall limit, the idle
/// exit, or an external stop. Starts at `min_workers`, adds one worker per
/// tick while the READY backlog exceeds `scale_up_backlog` per worker, and
/// lets idle workers retire down to the minimum. On stop, running jobs are
/// allowed to finish.
pub fn run_launcher(store: &JobStore, policy: PoolPolicy, opts: &LauncherOptions) -> Result<LauncherSummary> {
    run_launcher_until(store, policy, opts, Arc::new(AtomicBool::new(false)))
}

pub fn run_launcher_until(
    store: &JobStore,
    policy: PoolPolicy,
    opts: &LauncherOptions,
    stop: Arc<AtomicBool>,
) -> Result<LauncherSummary> {
    policy.validate()?;
    let started = Instant::now();
    let shared = Arc::new(Shared {
        policy,
        tick: Duration::from_secs_f64(opts.tick_s.max(0.001)),
        active: AtomicUsize::new(0),
        stop: Arc::new(AtomicBool::new(false)),
        timings: Mutex::new(Vec::new()),
    });
    store.launcher_started(policy.min_workers, policy.max_workers)?;
    let pid = std::process::id();
    let mut spawned = 0usize;
    let mut handles: Vec<JoinHandle<Result<()>>> = Vec::new();
    let mut spawn = |handles: &mut Vec<JoinHandle<Result<()>>>| -> Result<()> {
        let worker_store = store.reopen()?;
        let id = format!("w{pid}-{spawned}");
        spawned += 1;
        let sh = shared.clone();
        handles.push(std::thread::spawn(move || worker_loop(worker_store, id, sh)));
        Ok(())
    };
    for _ in 0..policy.min_workers {
        shared.active.fetch_add(1, Ordering::SeqCst);
        spawn(&mut handles)?;
    }

    let mut timeline = Vec::new();
    let mut recovered = Vec::new();
    let mut last_persist: Option<Instant> = None;
    let mut idle_since: Option<Instant> = None;
    let reason = loop {
        recovered.extend(store.recover_stale(now())?);
        let counts = store.counts()?;
        let (ready, running) = (counts[&JobState::Ready], counts[&JobState::Running]);
        let w = shared.active.load(Ordering::SeqCst);
        if !store.paused()? && w < policy.max_workers && ready as f64 > policy.scale_up_backlog * w as f64 {
            shared.active.fetch_add(1, Ordering::SeqCst);
            spawn(&mut handles)?;
        }
        let sample = PoolSample {
            t_s: started.elapsed().as_secs_f64(),
            workers: shared.active.load(Ordering::SeqCst),
            ready,
            running,
        };
        timeline.push(sample);
        if last_persist.is_none_or(|t| t.elapsed().as_secs_f64() >= opts.persist_every_s) {
            store.record_pool_sample(sample)?;
            last_persist = Some(Instant::now());
        }
        handles.retain(|h| !h.is_finished());

        if stop.load(Ordering::SeqCst) {
            break StopReason::Requested;
        }
        if sample.t_s >= opts.wall_limit_s {
            break StopReason::WallLimit;
        }
        if ready + running == 0 {
            let since = *idle_since.get_or_insert_with(Instant::now);
            if opts.exit_when_idle_s.is_some_and(|lim| since.elapsed().as_secs_f64() >= lim) {
                break StopReason::Idle;
            }
        } else {
            idle_since = None;
        }
        std::thread::sleep(shared.tick);
    };

    shared.stop.store(true, Ordering::SeqCst);
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(Error::Stage("worker thread panicked".into()));
            }
        }
    }
    store.launcher_stopped()?;
    if let Some(e) = first_err {
        return Err(e);
    }
    let jobs = std::mem::take(&mut *shared.timings.lock().unwrap_or_else(|e| e.into_inner()));
    Ok(LauncherSummary { jobs, timeline, wall_s: started.elapsed().as_secs_f64(), stop: reason, recovered })
}
