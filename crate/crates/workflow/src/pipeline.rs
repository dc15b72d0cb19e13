use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::store::{JobRecord, JobSpec, JobStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default = "enabled")]
    pub enabled: bool,
    /// Passed to the stage as its `params` argument.
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub max_attempts: Option<u32>,
}

fn enabled() -> bool {
    true
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { enabled: true, params: Map::new(), max_attempts: None }
    }
}

impl StageConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// One entry per stage; a stage left out is an error, a disabled stage
/// drops itself and everything downstream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub montage: Option<StageConfig>,
    pub align: Option<StageConfig>,
    pub relax: Option<StageConfig>,
    pub mask: Option<StageConfig>,
    pub segment: Option<StageConfig>,
    pub reconcile: Option<StageConfig>,
    pub mesh: Option<StageConfig>,
    pub skeletonize: Option<StageConfig>,
}

pub const STAGES: [&str; 8] = ["montage", "align", "relax", "mask", "segment", "reconcile", "mesh", "skeletonize"];

impl PipelineConfig {
    pub fn all_enabled() -> Self {
        let s = Some(StageConfig::default());
        Self {
            montage: s.clone(),
            align: s.clone(),
            relax: s.clone(),
            mask: s.clone(),
            segment: s.clone(),
            reconcile: s.clone(),
            mesh: s.clone(),
            skeletonize: s,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageConfig> {
        match name {
            "montage" => self.montage.as_ref(),
            "align" => self.align.as_ref(),
            "relax" => self.relax.as_ref(),
            "mask" => self.mask.as_ref(),
            "segment" => self.segment.as_ref(),
            "reconcile" => self.reconcile.as_ref(),
            "mesh" => self.mesh.as_ref(),
            "skeletonize" => self.skeletonize.as_ref(),
            _ => None,
        }
    }

    pub fn stage_mut(&mut self, name: &str) -> Option<&mut Option<StageConfig>> {
        Some(match name {
            "montage" => &mut self.montage,
            "align" => &mut self.align,
            "relax" => &mut self.relax,
            "mask" => &mut self.mask,
            "segment" => &mut self.segment,
            "reconcile" => &mut self.reconcile,
            "mesh" => &mut self.mesh,
            "skeletonize" => &mut self.skeletonize,
            _ => return None,
        })
    }
}

struct Builder<'a> {
    store: &'a JobStore,
    ds: &'a Dataset,
    jobs: Vec<JobRecord>,
}

impl Builder<'_> {
    fn submit(&mut self, stage: &str, cfg: &StageConfig, deps: &[String], unit: Option<(&str, Value)>) -> Result<String> {
        let mut spec = JobSpec::new(stage)
            .arg("dataset", self.ds.root.to_string_lossy().into_owned())
            .arg("params", Value::Object(cfg.params.clone()))
            .deps(deps.iter().cloned())
            .tag("dataset", self.ds.name())
            .tag("stage", stage);
        if let Some((key, value)) = unit {
            let shown = value.as_str().map(str::to_string).unwrap_or_else(|| value.to_string());
            spec = spec.arg(key, value).tag(key, shown);
        }
        if let Some(n) = cfg.max_attempts {
            spec = spec.max_attempts(n);
        }
        let job = self.store.submit(spec)?;
        let id = job.id.clone();
        self.jobs.push(job);
        Ok(id)
    }
}

/// Submits the processing DAG for a dataset:
/// montage per section, align per adjacent pair, then relax, mask,
/// segment per subvolume, reconcile, and mesh plus skeletonize.
pub fn define_pipeline(store: &JobStore, ds: &Dataset, cfg: &PipelineConfig) -> Result<Vec<JobRecord>> {
    let mut stage_cfg = Vec::new();
    for name in STAGES {
        let c = cfg.stage(name).ok_or_else(|| Error::Config(format!("missing config for stage {name}")))?;
        stage_cfg.push(c.clone());
    }
    let grid = ds.grid()?;
    store.register_dataset(ds.name(), &ds.root)?;
    for s in 0..ds.info.num_sections as u32 {
        store.add_section(ds.name(), s)?;
    }
    let mut b = Builder { store, ds, jobs: Vec::new() };
    let n = ds.info.num_sections as u32;
    let [montage, align, relax, mask, segment, reconcile, mesh, skel] = &stage_cfg[..] else {
        unreachable!()
    };

    if !montage.enabled {
        return Ok(b.jobs);
    }
    let montage_ids = (0..n)
        .map(|s| b.submit("montage", montage, &[], Some(("section", Value::from(s)))))
        .collect::<Result<Vec<_>>>()?;

    if !align.enabled {
        return Ok(b.jobs);
    }
    let mut frontier = montage_ids.clone();
    if n >= 2 {
        frontier = (0..n - 1)
            .map(|p| {
                let deps = [montage_ids[p as usize].clone(), montage_ids[p as usize + 1].clone()];
                b.submit("align", align, &deps, Some(("pair", Value::from(p))))
            })
            .collect::<Result<Vec<_>>>()?;
    }

    if !relax.enabled {
        return Ok(b.jobs);
    }
    let relax_id = b.submit("relax", relax, &frontier, None)?;
    if !mask.enabled {
        return Ok(b.jobs);
    }
    let mask_id = b.submit("mask", mask, &[relax_id], None)?;
    if !segment.enabled {
        return Ok(b.jobs);
    }
    let seg_ids = grid
        .iter()
        .map(|spec| b.submit("segment", segment, std::slice::from_ref(&mask_id), Some(("subvolume", Value::from(spec.name())))))
        .collect::<Result<Vec<_>>>()?;
    if !reconcile.enabled {
        return Ok(b.jobs);
    }
    let rec_id = b.submit("reconcile", reconcile, &seg_ids, None)?;
    if mesh.enabled {
        b.submit("mesh", mesh, std::slice::from_ref(&rec_id), None)?;
    }
    if skel.enabled {
        b.submit("skeletonize", skel, &[rec_id], None)?;
    }
    Ok(b.jobs)
}
