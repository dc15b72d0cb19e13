use std::sync::atomic::AtomicBool;

use emflow_workflow::ingest::{IngestConfig, IngestEvent, Ingestor};
use emflow_workflow::store::{now, JobFilter, JobStore};
use emflow_workflow::sweep::{run_sweep, sweep_base, DetectorConfig, SweepCorpus, SweepSpec};
use emflow_workflow::{Dataset, SyntheticSpec};
use serde_json::{json, Map, Value};

fn set(min: u32, max: u32) -> Map<String, Value> {
    json!({ "min_octave_px": min, "max_octave_px": max }).as_object().unwrap().clone()
}

#[test]
fn synthetic_sweep_rows_have_table_shape() {
    let spec = SweepSpec {
        parameter_sets: vec![set(32, 512), set(128, 512), set(256, 512)],
        corpus: SweepCorpus::Synthetic { counts: [4, 2, 2, 2], seed: 3 },
        detector: DetectorConfig::default(),
        base: sweep_base(),
    };
    let report = run_sweep(&spec).unwrap();
    assert_eq!(report.sections, 10);
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.windows(2).all(|w| w[1].accumulated_error <= w[0].accumulated_error));
    for r in &report.rows {
        assert!((r.error_rate - r.failed.len() as f64 / 10.0).abs() < 1e-12);
        assert!(r.accumulated_error <= r.error_rate + 1e-12);
    }
    // the unrecoverable tier fails under every set
    let tiers = report.tiers.as_ref().unwrap();
    let floor: Vec<usize> = (0..10).filter(|&i| format!("{:?}", tiers[i]).contains("Floor")).collect();
    assert_eq!(floor.len(), 2);
    assert!(report.rows.iter().all(|r| floor.iter().all(|i| r.failed.contains(i))));
    assert!(report.table().lines().count() == 4);
}

#[test]
fn sweep_rejects_bad_parameters() {
    let spec = SweepSpec {
        parameter_sets: vec![json!({ "min_octave_px": "big" }).as_object().unwrap().clone()],
        corpus: SweepCorpus::Synthetic { counts: [1, 0, 0, 0], seed: 1 },
        detector: DetectorConfig::default(),
        base: sweep_base(),
    };
    assert!(run_sweep(&spec).is_err());
}

#[test]
fn dataset_corpus_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let ds = SyntheticSpec { sections: 2, ..SyntheticSpec::default() }.create(dir.path()).unwrap();
    let spec = SweepSpec {
        parameter_sets: vec![Map::new()],
        corpus: SweepCorpus::Dataset { root: ds.root.clone() },
        detector: DetectorConfig::default(),
        base: emflow_core::imageops::MontageParams::default(),
    };
    let report = run_sweep(&spec).unwrap();
    assert_eq!(report.sections, 2);
    assert_eq!(report.rows[0].error_rate, 0.0);
}

fn ingest_setup() -> (tempfile::TempDir, JobStore, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let store = JobStore::open(dir.path().join("jobs.db")).unwrap();
    let ds = Dataset::create(dir.path().join("ds"), SyntheticSpec::default().info()).unwrap();
    (dir, store, ds)
}

fn event(i: u32) -> IngestEvent {
    IngestEvent { section_index: i, arrival: now(), tile_paths: vec![] }
}

#[test]
fn three_events_three_tagged_jobs_and_duplicates_ignored() {
    let (_d, store, ds) = ingest_setup();
    let ing = Ingestor::new(&store, &ds, IngestConfig::default()).unwrap();
    for i in 0..3 {
        assert!(ing.on_event(&event(i)).unwrap().is_some());
    }
    assert!(ing.on_event(&event(1)).unwrap().is_none());
    let jobs = store.list(&JobFilter::default()).unwrap();
    assert_eq!(jobs.len(), 3);
    let sections: Vec<&str> = jobs.iter().map(|j| j.tags["section"].as_str()).collect();
    assert_eq!(sections, ["0", "1", "2"]);
    assert!(jobs.iter().all(|j| j.app == "montage"));
}

#[test]
fn simulated_acquisition_writes_tiles_on_cadence() {
    let (_d, store, ds) = ingest_setup();
    let ing = Ingestor::new(&store, &ds, IngestConfig::default()).unwrap();
    let synth = SyntheticSpec::default();
    let t0 = std::time::Instant::now();
    let events = ing.simulate(Some(&synth), 0.1, 3, &AtomicBool::new(false)).unwrap();
    assert!(t0.elapsed().as_secs_f64() >= 0.2);
    assert_eq!(events.len(), 3);
    assert!(events.iter().all(|e| e.tile_paths.len() == 2));
    assert!(events.windows(2).all(|w| w[1].arrival >= w[0].arrival));
    assert_eq!(ds.raw_sections(), vec![0, 1, 2]);
    assert_eq!(store.list(&JobFilter::default()).unwrap().len(), 3);
}

#[test]
fn directory_watch_picks_up_new_sections() {
    let (_d, store, ds) = ingest_setup();
    let synth = SyntheticSpec::default();
    synth.acquire_section(&ds, 0).unwrap();
    let writer = {
        let ds = ds.clone();
        std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_millis(150));
            synth.acquire_section(&ds, 1).unwrap();
        })
    };
    let ing = Ingestor::new(&store, &ds, IngestConfig::default()).unwrap();
    let events = ing.watch(0.02, Some(2), 10.0, &AtomicBool::new(false)).unwrap();
    writer.join().unwrap();
    assert_eq!(events.iter().map(|e| e.section_index).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(store.list(&JobFilter::default()).unwrap().len(), 2);
}

#[test]
fn sweep_rejects_unknown_keys() {
    let spec = SweepSpec {
        parameter_sets: vec![json!({ "min_octave": 64 }).as_object().unwrap().clone()],
        corpus: SweepCorpus::Synthetic { counts: [1, 0, 0, 0], seed: 1 },
        detector: DetectorConfig::default(),
        base: sweep_base(),
    };
    assert!(run_sweep(&spec).is_err());
}
