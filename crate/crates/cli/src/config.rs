use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emflow_workflow::pipeline::STAGES;
use emflow_workflow::PoolPolicy;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Contents of the TOML config file. Relative paths are taken relative to
/// the file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Job database file.
    pub store: Option<PathBuf>,
    /// API bind address.
    pub bind: Option<String>,
    /// Dataset used when `--dataset` is not given: a name from `datasets`
    /// or a directory.
    pub dataset: Option<String>,
    pub datasets: BTreeMap<String, PathBuf>,
    /// Default parameters per stage, e.g. `[params.montage]`.
    pub params: BTreeMap<String, Map<String, Value>>,
    pub pool: Option<PoolPolicy>,
}

pub const DEFAULT_STORE: &str = "emflow.db";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// Stage names accepted under `[params]`; `relax` shares `align`.
const PARAM_STAGES: [&str; 6] = ["montage", "align", "mask", "segment", "reconcile", "skeletonize"];

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for stage in cfg.params.keys() {
            if !PARAM_STAGES.contains(&stage.as_str()) {
                bail!("config {}: unknown stage [params.{stage}]", path.display());
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = cfg.store.as_mut() {
            rebase(s);
        }
        for p in cfg.datasets.values_mut() {
            rebase(p);
        }
        if let Some(d) = cfg.dataset.as_mut() {
            if !cfg.datasets.contains_key(d.as_str()) && Path::new(d.as_str()).is_relative() {
                *d = base.join(d.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Resolves a dataset name or directory.
    pub fn dataset_root(&self, flag: Option<&str>) -> Option<PathBuf> {
        let d = flag.or(self.dataset.as_deref())?;
        Some(self.datasets.get(d).cloned().unwrap_or_else(|| PathBuf::from(d)))
    }

    /// Stage parameters: file values with `overrides` merged on top.
    pub fn stage_params(&self, stage: &str, overrides: &Map<String, Value>) -> Map<String, Value> {
        let key = if stage == "relax" { "align" } else { stage };
        let mut p = self.params.get(key).cloned().unwrap_or_default();
        emflow_workflow::store::merge_args(&mut p, overrides);
        p
    }
}

/// Deserializes stage parameters, rejecting keys the stage does not know.
pub fn typed_params<T: DeserializeOwned + Serialize>(stage: &str, map: &Map<String, Value>) -> Result<T> {
    let typed: T = serde_json::from_value(Value::Object(map.clone()))
        .with_context(|| format!("invalid {stage} parameters"))?;
    if let Value::Object(known) = serde_json::to_value(&typed)? {
        if let Some(k) = map.keys().find(|k| !known.contains_key(*k)) {
            bail!("unknown {stage} parameter {k:?}");
        }
    }
    Ok(typed)
}

/// Parses `key=value`; the value is read as JSON when it parses, otherwise
/// kept as a string.
pub fn parse_kv(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

pub fn kv_map(pairs: &[(String, Value)]) -> Map<String, Value> {
    pairs.iter().cloned().collect()
}

pub fn check_stage(name: &str) -> Result<(), String> {
    if STAGES.contains(&name) {
        Ok(())
    } else {
        Err(format!("unknown stage {name:?}; expected one of {}", STAGES.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_values_are_json_or_strings() {
        assert_eq!(parse_kv("a=3").unwrap(), ("a".into(), Value::from(3)));
        assert_eq!(parse_kv("a=x=y").unwrap(), ("a".into(), Value::from("x=y")));
        assert_eq!(parse_kv("a={\"b\":1}").unwrap().1, serde_json::json!({"b": 1}));
        assert!(parse_kv("novalue").is_err());
        assert!(parse_kv("=1").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "store = \"db/jobs.db\"\ndataset = \"tiny\"\n[datasets]\ntiny = \"data/tiny\"\n[params.montage]\nmin_octave_px = 128\n",
        )
        .unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.store.clone().unwrap(), dir.path().join("db/jobs.db"));
        assert_eq!(cfg.dataset_root(None).unwrap(), dir.path().join("data/tiny"));
        assert_eq!(cfg.dataset_root(Some("/x")).unwrap(), PathBuf::from("/x"));
    }

    #[test]
    fn unknown_keys_and_stages_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "stor = \"x\"\n").unwrap();
        assert!(Config::load(&path).is_err());
        std::fs::write(&path, "[params.montag]\nx = 1\n").unwrap();
        assert!(Config::load(&path).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = Config::default();
        cfg.params.insert("montage".into(), kv_map(&[("min_octave_px".into(), Value::from(64))]));
        let ov = kv_map(&[("min_octave_px".into(), Value::from(256))]);
        let p = cfg.stage_params("montage", &ov);
        assert_eq!(p["min_octave_px"], 256);
        let typed: emflow_workflow::stages::MontageStage = typed_params("montage", &p).unwrap();
        assert_eq!(typed.params.min_octave_px, 256);
        let bad = kv_map(&[("min_octave".into(), Value::from(1))]);
        assert!(typed_params::<emflow_workflow::stages::MontageStage>("montage", &bad).is_err());
    }
}
