use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{Dataset, SyntheticSpec};
use crate::error::Result;
use crate::store::{now, JobRecord, JobSpec, JobStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestEvent {
    pub section_index: u32,
    pub arrival: DateTime<Utc>,
    pub tile_paths: Vec<PathBuf>,
}

/// What each arriving section submits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub app: String,
    /// Extra job arguments, merged over `dataset` and `section`.
    pub args: Map<String, Value>,
    pub max_attempts: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { app: "montage".into(), args: Map::new(), max_attempts: 3 }
    }
}

/// Smallest pool that keeps up with one section per `cadence_s` when each
/// takes `runtime_s`.
pub fn min_pool(runtime_s: f64, cadence_s: f64) -> usize {
    ((runtime_s / cadence_s) - 1e-9).ceil().max(1.0) as usize
}

pub struct Ingestor<'a> {
    pub store: &'a JobStore,
    pub dataset: &'a Dataset,
    pub config: IngestConfig,
}

impl<'a> Ingestor<'a> {
    pub fn new(store: &'a JobStore, dataset: &'a Dataset, config: IngestConfig) -> Result<Self> {
        store.register_dataset(dataset.name(), &dataset.root)?;
        Ok(Self { store, dataset, config })
    }

    /// Registers the section and submits its job. A section seen before is
    /// ignored with a warning.
    pub fn on_event(&self, ev: &IngestEvent) -> Result<Option<JobRecord>> {
        if !self.store.add_section(self.dataset.name(), ev.section_index)? {
            log::warn!("section {} of {} already ingested; ignoring", ev.section_index, self.dataset.name());
            return Ok(None);
        }
        let mut spec = JobSpec::new(self.config.app.clone())
            .arg("dataset", self.dataset.root.to_string_lossy().into_owned())
            .arg("section", ev.section_index)
            .tag("dataset", self.dataset.name())
            .tag("section", ev.section_index)
            .tag("stage", "montage")
            .tag("arrival", crate::store::ts(ev.arrival))
            .max_attempts(self.config.max_attempts);
        for (k, v) in &self.config.args {
            spec.args.insert(k.clone(), v.clone());
        }
        self.store.submit(spec).map(Some)
    }

    fn event_for(&self, section: u32) -> Result<IngestEvent> {
        let tile_paths = match emflow_core::volume::SectionManifest::load(self.dataset.raw_manifest(section)) {
            Ok(m) => m.tile_paths,
            Err(_) => Vec::new(),
        };
        Ok(IngestEvent { section_index: section, arrival: now(), tile_paths })
    }

    /// Simulated microscope: section `i` arrives at `i * cadence_s`. With a
    /// synthetic spec the tiles are written at arrival time.
    pub fn simulate(
        &self,
        synth: Option<&SyntheticSpec>,
        cadence_s: f64,
        num_sections: u32,
        stop: &AtomicBool,
    ) -> Result<Vec<IngestEvent>> {
        let start = Instant::now();
        let mut events = Vec::new();
        for i in 0..num_sections {
            let due = Duration::from_secs_f64(cadence_s * i as f64);
            while start.elapsed() < due {
                if stop.load(Ordering::SeqCst) {
                    return Ok(events);
                }
                std::thread::sleep((due - start.elapsed()).min(Duration::from_millis(20)));
            }
            if let Some(s) = synth {
                s.acquire_section(self.dataset, i)?;
            }
            let ev = self.event_for(i)?;
            self.on_event(&ev)?;
            events.push(ev);
        }
        Ok(events)
    }

    /// Polls the raw directory and ingests each new section, until
    /// `num_sections` have arrived, `timeout_s` passes, or `stop` is set.
    pub fn watch(&self, poll_s: f64, num_sections: Option<usize>, timeout_s: f64, stop: &AtomicBool) -> Result<Vec<IngestEvent>> {
        let start = Instant::now();
        let mut events = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        loop {
            for s in self.dataset.raw_sections() {
                if seen.insert(s) {
                    let ev = self.event_for(s)?;
                    if self.on_event(&ev)?.is_some() {
                        events.push(ev);
                    }
                }
            }
            let done = num_sections.is_some_and(|n| seen.len() >= n);
            if done || stop.load(Ordering::SeqCst) || start.elapsed().as_secs_f64() >= timeout_s {
                return Ok(events);
            }
            std::thread::sleep(Duration::from_secs_f64(poll_s.max(0.01)));
        }
    }
}
