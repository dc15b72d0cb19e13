use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use emflow_core::imageops::{montage_tiles, MontageParams, MontageStatus, DEFAULT_FAILURE_TOLERANCE};
use emflow_core::synth::{sweep_corpus, SweepTier, SWEEP_OVERLAP};
use emflow_core::volume::SectionManifest;
use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::store::merge_args;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepCorpus {
    /// Two-tile sections in four difficulty tiers (easy, moderate, severe,
    /// unrecoverable floor).
    Synthetic { counts: [usize; 4], seed: u64 },
    /// Raw sections of a dataset directory.
    Dataset { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub tolerance_frac: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { tolerance_frac: DEFAULT_FAILURE_TOLERANCE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Overrides applied to `base`, one row each, in order.
    pub parameter_sets: Vec<Map<String, Value>>,
    pub corpus: SweepCorpus,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "sweep_base")]
    pub base: MontageParams,
}

/// Montage parameters tuned to the synthetic sweep corpus.
pub fn sweep_base() -> MontageParams {
    MontageParams { nominal_overlap_frac: SWEEP_OVERLAP, search_margin_frac: 0.1, ..MontageParams::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Map<String, Value>,
    pub runtime_s: f64,
    pub error_rate: f64,
    /// Fraction of sections failed by this set and every earlier one.
    pub accumulated_error: f64,
    pub failed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sections: usize,
    pub rows: Vec<SweepRow>,
    /// Tier of each section for synthetic corpora.
    pub tiers: Option<Vec<SweepTier>>,
}

impl SweepReport {
    /// Plain-text table with the columns params, runtime, error rate and
    /// accumulated error.
    pub fn table(&self) -> String {
        let mut s = format!("{:<40} {:>10} {:>8} {:>8}\n", "params", "runtime_s", "error", "accum");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<40} {:>10.2} {:>7.1}% {:>7.1}%\n",
                Value::Object(r.params.clone()).to_string(),
                r.runtime_s,
                100.0 * r.error_rate,
                100.0 * r.accumulated_error
            ));
        }
        s
    }
}

/// (error rate, accumulated error) per set, where accumulated error after
/// set k counts sections failed by all sets 1..=k.
pub fn accumulate(failed: &[BTreeSet<usize>], sections: usize) -> Vec<(f64, f64)> {
    let n = sections.max(1) as f64;
    let mut common: Option<BTreeSet<usize>> = None;
    failed
        .iter()
        .map(|f| {
            let c = match common.take() {
                None => f.clone(),
                Some(prev) => prev.intersection(f).copied().collect(),
            };
            let row = (f.len() as f64 / n, c.len() as f64 / n);
            common = Some(c);
            row
        })
        .collect()
}

struct Section {
    tiles: Vec<GrayImage>,
    layout: (usize, usize),
    overlap: Option<f64>,
}

fn load_corpus(corpus: &SweepCorpus) -> Result<(Vec<Section>, Option<Vec<SweepTier>>)> {
    match corpus {
        SweepCorpus::Synthetic { counts, seed } => {
            let items = sweep_corpus(*counts, *seed);
            let tiers = items.iter().map(|(t, _)| *t).collect();
            let sections = items
                .into_iter()
                .map(|(_, p)| Section { tiles: vec![p.a, p.b], layout: (1, 2), overlap: None })
                .collect();
            Ok((sections, Some(tiers)))
        }
        SweepCorpus::Dataset { root } => {
            let ds = Dataset::open(root)?;
            let sections = ds
                .raw_sections()
                .into_iter()
                .map(|s| {
                    let m = SectionManifest::load(ds.raw_manifest(s))?;
                    Ok(Section { tiles: m.load_tiles()?, layout: m.layout, overlap: Some(m.nominal_overlap_frac) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((sections, None))
        }
    }
}

/// Runs every parameter set over the whole corpus in order. A section fails
/// a set when the montage canvas fails the size check.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    if spec.parameter_sets.is_empty() {
        return Err(Error::Config("a sweep needs at least one parameter set".into()));
    }
    let (sections, tiers) = load_corpus(&spec.corpus)?;
    let base = serde_json::to_value(&spec.base)?;
    let mut rows = Vec::new();
    let mut failed_sets = Vec::new();
    for set in &spec.parameter_sets {
        let mut merged = base.as_object().cloned().unwrap_or_default();
        if let Some(k) = set.keys().find(|k| !merged.contains_key(*k)) {
            return Err(Error::Config(format!("unknown montage parameter {k:?}")));
        }
        merge_args(&mut merged, set);
        let params: MontageParams = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("bad sweep parameters {set:?}: {e}")))?;
        params.validate()?;
        let start = Instant::now();
        let failed: BTreeSet<usize> = sections
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let p = MontageParams { nominal_overlap_frac: s.overlap.unwrap_or(params.nominal_overlap_frac), ..params.clone() };
                let out = montage_tiles(i as u32, &s.tiles, s.layout, &p, spec.detector.tolerance_frac)?;
                Ok((i, out.report.status == MontageStatus::Fail))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter_map(|(i, f)| f.then_some(i))
            .collect();
        rows.push(SweepRow {
            params: set.clone(),
            runtime_s: start.elapsed().as_secs_f64(),
            error_rate: 0.0,
            accumulated_error: 0.0,
            failed: failed.iter().copied().collect(),
        });
        failed_sets.push(failed);
    }
    for (row, (rate, acc)) in rows.iter_mut().zip(accumulate(&failed_sets, sections.len())) {
        row.error_rate = rate;
        row.accumulated_error = acc;
    }
    Ok(SweepReport { sections: sections.len(), rows, tiers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_set_has_zero_rates() {
        assert_eq!(accumulate(&[BTreeSet::new()], 10), vec![(0.0, 0.0)]);
    }

    #[test]
    fn nested_failures() {
        let a: BTreeSet<usize> = (1..=35).collect();
        let b: BTreeSet<usize> = (1..=10).collect();
        assert_eq!(accumulate(&[a, b], 100), vec![(0.35, 0.35), (0.10, 0.10)]);
    }

    #[test]
    fn accumulated_uses_intersection_not_latest() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [3, 4, 5, 6].into();
        let c: BTreeSet<usize> = [1, 2].into();
        let rows = accumulate(&[a, b, c], 10);
        assert_eq!(rows, vec![(0.3, 0.3), (0.4, 0.1), (0.2, 0.0)]);
        assert!(rows.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn empty_spec_is_rejected() {
        let spec = SweepSpec {
            parameter_sets: vec![],
            corpus: SweepCorpus::Synthetic { counts: [1, 0, 0, 0], seed: 1 },
            detector: DetectorConfig::default(),
            base: sweep_base(),
        };
        assert!(run_sweep(&spec).is_err());
    }
}
