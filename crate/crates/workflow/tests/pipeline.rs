use std::collections::BTreeMap;

use emflow_core::geometry::{import_mesh, import_skeleton};
use emflow_workflow::pipeline::STAGES;
use emflow_workflow::store::{JobState, JobStore};
use emflow_workflow::{define_pipeline, run_launcher, LauncherOptions, PipelineConfig, PoolPolicy, StageConfig, SyntheticSpec};

fn small(sections: usize) -> SyntheticSpec {
    SyntheticSpec { sections, cube: [512, 256, 8], ..SyntheticSpec::default() }
}

fn by_stage(jobs: &[emflow_workflow::JobRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for j in jobs {
        *m.entry(j.app.clone()).or_insert(0) += 1;
    }
    m
}

#[test]
fn three_sections_one_subvolume_gives_eleven_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(3).create(dir.path().join("ds")).unwrap();
    assert_eq!(ds.grid().unwrap().len(), 1);
    let store = JobStore::open(dir.path().join("jobs.db")).unwrap();
    let jobs = define_pipeline(&store, &ds, &PipelineConfig::all_enabled()).unwrap();
    // 3 montage + 2 align + relax + mask + 1 segment + reconcile + mesh + skeletonize
    assert_eq!(jobs.len(), 11);
    let counts = by_stage(&jobs);
    assert_eq!(counts["montage"], 3);
    assert_eq!(counts["align"], 2);
    let get = |app: &str| jobs.iter().filter(|j| j.app == app).collect::<Vec<_>>();
    let segs: Vec<String> = get("segment").iter().map(|j| j.id.clone()).collect();
    assert_eq!(get("reconcile")[0].deps, segs);
    let rec = get("reconcile")[0].id.clone();
    assert_eq!(get("mesh")[0].deps, vec![rec.clone()]);
    assert_eq!(get("skeletonize")[0].deps, vec![rec]);
    let align1 = get("align")[1];
    let m: Vec<String> = get("montage").iter().map(|j| j.id.clone()).collect();
    assert_eq!(align1.deps, vec![m[1].clone(), m[2].clone()]);
    assert_eq!(align1.tags["pair"], "1");
    assert!(get("montage").iter().all(|j| j.state == JobState::Ready));
    assert!(jobs.iter().filter(|j| j.app != "montage").all(|j| j.state == JobState::Created));
    assert_eq!(store.sections(ds.name()).unwrap().len(), 3);
}

#[test]
fn subvolume_count_follows_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = SyntheticSpec { sections: 2, ..SyntheticSpec::default() }.create(dir.path().join("ds")).unwrap();
    let n = ds.grid().unwrap().len();
    assert!(n > 1);
    let store = JobStore::open(dir.path().join("jobs.db")).unwrap();
    let jobs = define_pipeline(&store, &ds, &PipelineConfig::all_enabled()).unwrap();
    assert_eq!(by_stage(&jobs)["segment"], n);
    assert_eq!(jobs.len(), 2 + 1 + 1 + 1 + n + 1 + 2);
}

#[test]
fn disabling_a_stage_drops_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(3).create(dir.path().join("ds")).unwrap();
    for (i, stage) in STAGES.iter().enumerate() {
        let store = JobStore::open(dir.path().join(format!("jobs{i}.db"))).unwrap();
        let mut cfg = PipelineConfig::all_enabled();
        *cfg.stage_mut(stage).unwrap() = Some(StageConfig::disabled());
        let apps = by_stage(&define_pipeline(&store, &ds, &cfg).unwrap());
        assert!(!apps.contains_key(*stage));
        for (j, other) in STAGES.iter().enumerate() {
            let downstream = j > i && !(*stage == "mesh" && *other == "skeletonize");
            assert_eq!(apps.contains_key(*other), !downstream && j != i, "disabled {stage}, checking {other}");
        }
    }
}

#[test]
fn missing_stage_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(2).create(dir.path().join("ds")).unwrap();
    let store = JobStore::open(dir.path().join("jobs.db")).unwrap();
    let mut cfg = PipelineConfig::all_enabled();
    cfg.mask = None;
    assert!(define_pipeline(&store, &ds, &cfg).is_err());
    assert!(store.list(&Default::default()).unwrap().is_empty());
}

#[test]
fn pipeline_runs_end_to_end_under_launcher() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(4).create(dir.path().join("ds")).unwrap();
    let store = JobStore::open(dir.path().join("jobs.db")).unwrap();
    let jobs = define_pipeline(&store, &ds, &PipelineConfig::all_enabled()).unwrap();
    let opts = LauncherOptions { wall_limit_s: 300.0, tick_s: 0.02, exit_when_idle_s: Some(0.3), persist_every_s: 0.5 };
    let policy = PoolPolicy { min_workers: 2, max_workers: 4, ..PoolPolicy::default() };
    run_launcher(&store, policy, &opts).unwrap();
    for j in &jobs {
        let r = store.get(&j.id).unwrap();
        assert_eq!(r.state, JobState::Done, "{} {} {:?}", r.id, r.app, r.detail);
    }
    let meshes: Vec<_> = std::fs::read_dir(ds.mesh_dir()).unwrap().collect();
    assert!(!meshes.is_empty());
    let skels: Vec<_> = std::fs::read_dir(ds.skeleton_dir()).unwrap().collect();
    assert!(!skels.is_empty());
    let first = skels[0].as_ref().unwrap().path();
    let id: u32 = first.file_stem().unwrap().to_str().unwrap().parse().unwrap();
    let sk = import_skeleton(&first, id).unwrap();
    assert!(sk.is_forest() && !sk.nodes.is_empty());
    let mesh = import_mesh(ds.mesh_path(id), id).unwrap();
    assert!(!mesh.faces.is_empty());
    assert!(store.sections(ds.name()).unwrap().iter().all(|s| s.status.is_some()));
}
