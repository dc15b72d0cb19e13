use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use emflow_workflow::store::{JobFilter, JobSpec, JobState, JobStore};
use emflow_workflow::{run_launcher, run_launcher_until, LauncherOptions, PoolPolicy, StopReason};
use rand::{Rng, SeedableRng};

fn store() -> (tempfile::TempDir, JobStore) {
    let dir = tempfile::tempdir().unwrap();
    let s = JobStore::open(dir.path().join("jobs.db")).unwrap();
    (dir, s)
}

fn opts(idle_exit: f64) -> LauncherOptions {
    LauncherOptions { wall_limit_s: 60.0, tick_s: 0.01, exit_when_idle_s: Some(idle_exit), persist_every_s: 0.05 }
}

#[test]
fn burst_grows_pool_to_max() {
    let (_d, s) = store();
    for _ in 0..50 {
        s.submit(JobSpec::new("sleep").arg("seconds", 0.1)).unwrap();
    }
    let policy = PoolPolicy { min_workers: 1, max_workers: 8, scale_up_backlog: 2.0, scale_down_idle_s: 0.2 };
    let sum = run_launcher(&s, policy, &opts(0.3)).unwrap();
    assert_eq!(sum.stop, StopReason::Idle);
    assert_eq!(sum.peak_workers(), 8);
    assert!(sum.timeline.iter().all(|p| (1..=8).contains(&p.workers)));
    assert_eq!(sum.jobs.len(), 50);
    assert_eq!(s.count_in(JobState::Done).unwrap(), 50);
    let status = s.launcher_status().unwrap();
    assert!(!status.active);
    assert!(!status.timeline.is_empty());
}

#[test]
fn idle_pool_shrinks_to_min() {
    let (_d, s) = store();
    for _ in 0..20 {
        s.submit(JobSpec::new("sleep").arg("seconds", 0.05)).unwrap();
    }
    let policy = PoolPolicy { min_workers: 2, max_workers: 6, scale_up_backlog: 1.0, scale_down_idle_s: 0.2 };
    let sum = run_launcher(&s, policy, &opts(1.0)).unwrap();
    assert!(sum.peak_workers() > 2);
    assert_eq!(sum.timeline.last().unwrap().workers, 2);
    assert!(sum.timeline.iter().all(|p| (2..=6).contains(&p.workers)));
}

#[test]
fn no_jobs_stays_at_min() {
    let (_d, s) = store();
    let policy = PoolPolicy { min_workers: 3, max_workers: 5, scale_up_backlog: 2.0, scale_down_idle_s: 0.05 };
    let sum = run_launcher(&s, policy, &opts(0.3)).unwrap();
    assert!(sum.timeline.iter().all(|p| p.workers == 3));
}

#[test]
fn invalid_policy_is_rejected() {
    let (_d, s) = store();
    let policy = PoolPolicy { min_workers: 4, max_workers: 2, ..PoolPolicy::default() };
    assert!(run_launcher(&s, policy, &opts(0.1)).is_err());
    let policy = PoolPolicy { min_workers: 0, ..PoolPolicy::default() };
    assert!(run_launcher(&s, policy, &opts(0.1)).is_err());
}

#[test]
fn random_dag_runs_to_completion_with_sound_deps() {
    let (_d, s) = store();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut ids: Vec<String> = Vec::new();
    for _ in 0..60 {
        let mut spec = JobSpec::new("sleep").arg("seconds", rng.gen_range(0.0..0.03));
        for _ in 0..rng.gen_range(0..3usize.min(ids.len() + 1)) {
            spec = spec.dep(ids[rng.gen_range(0..ids.len())].clone());
        }
        ids.push(s.submit(spec).unwrap().id);
    }
    let policy = PoolPolicy { min_workers: 2, max_workers: 6, scale_up_backlog: 1.0, scale_down_idle_s: 1.0 };
    run_launcher(&s, policy, &opts(0.3)).unwrap();
    assert_eq!(s.count_in(JobState::Done).unwrap(), 60);

    let mut done_at: HashMap<String, i64> = HashMap::new();
    let log = s.all_transitions().unwrap();
    for t in &log {
        if t.to == JobState::Done {
            done_at.insert(t.job_id.clone(), t.seq);
        }
    }
    for t in log.iter().filter(|t| t.to == JobState::Running) {
        for d in s.get(&t.job_id).unwrap().deps {
            assert!(done_at[&d] < t.seq, "{} ran before dep {d} finished", t.job_id);
        }
    }
}

#[test]
fn failing_app_retries_until_success() {
    let (_d, s) = store();
    let j = s.submit(JobSpec::new("fail").arg("fail_times", 2).max_attempts(3)).unwrap();
    let policy = PoolPolicy { min_workers: 1, max_workers: 1, ..PoolPolicy::default() };
    let sum = run_launcher(&s, policy, &opts(0.2)).unwrap();
    let r = s.get(&j.id).unwrap();
    assert_eq!((r.state, r.attempts), (JobState::Done, 3));
    assert_eq!(sum.jobs.len(), 3);
}

#[test]
fn pause_holds_jobs_and_external_stop_drains() {
    let (_d, s) = store();
    s.set_paused(true).unwrap();
    for _ in 0..3 {
        s.submit(JobSpec::new("noop")).unwrap();
    }
    let stop = Arc::new(AtomicBool::new(false));
    let st = s.reopen().unwrap();
    let flag = stop.clone();
    let h = std::thread::spawn(move || {
        let o = LauncherOptions { exit_when_idle_s: None, ..opts(0.0) };
        run_launcher_until(&st, PoolPolicy::default(), &o, flag)
    });
    std::thread::sleep(std::time::Duration::from_millis(300));
    assert_eq!(s.count_in(JobState::Ready).unwrap(), 3);
    assert!(s.launcher_status().unwrap().active);
    s.set_paused(false).unwrap();
    let t0 = std::time::Instant::now();
    while s.count_in(JobState::Done).unwrap() < 3 {
        assert!(t0.elapsed().as_secs() < 10);
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    stop.store(true, Ordering::SeqCst);
    let sum = h.join().unwrap().unwrap();
    assert_eq!(sum.stop, StopReason::Requested);
    assert!(s.list(&JobFilter { state: Some(JobState::Running), ..Default::default() }).unwrap().is_empty());
}

#[test]
fn wall_limit_stops_launcher() {
    let (_d, s) = store();
    s.submit(JobSpec::new("sleep").arg("seconds", 0.5)).unwrap();
    let o = LauncherOptions { wall_limit_s: 0.2, tick_s: 0.01, exit_when_idle_s: None, persist_every_s: 1.0 };
    let sum = run_launcher(&s, PoolPolicy::default(), &o).unwrap();
    assert_eq!(sum.stop, StopReason::WallLimit);
    // the running job was allowed to finish
    assert_eq!(s.count_in(JobState::Done).unwrap(), 1);
}
