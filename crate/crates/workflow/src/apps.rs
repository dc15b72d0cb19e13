use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::stages;
use crate::store::{JobRecord, JobStore};

/// Unit of work one job covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Section,
    SectionPair,
    Subvolume,
    Volume,
    /// Utility apps with no data unit.
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ArgSpec {
    pub name: &'static str,
    pub required: bool,
    pub help: &'static str,
}

const fn req(name: &'static str, help: &'static str) -> ArgSpec {
    ArgSpec { name, required: true, help }
}

const fn opt(name: &'static str, help: &'static str) -> ArgSpec {
    ArgSpec { name, required: false, help }
}

pub struct JobContext<'a> {
    pub job: &'a JobRecord,
    pub store: &'a JobStore,
    pub workdir: &'a Path,
}

impl JobContext<'_> {
    /// Appends a line to the job's output log.
    pub fn log(&self, msg: &str) {
        let path = self.workdir.join("output.log");
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{msg}");
        }
    }
}

pub type AppFn = Arc<dyn Fn(&JobContext<'_>) -> Result<Value> + Send + Sync>;

#[derive(Clone)]
pub struct AppRegistration {
    pub name: String,
    pub granularity: Granularity,
    pub args: Vec<ArgSpec>,
    pub entry: AppFn,
}

impl fmt::Debug for AppRegistration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AppRegistration")
            .field("name", &self.name)
            .field("granularity", &self.granularity)
            .field("args", &self.args)
            .finish()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AppRegistry {
    apps: BTreeMap<String, AppRegistration>,
}

impl AppRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Utility apps (`noop`, `sleep`, `fail`) plus every pipeline stage.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        let add = |r: &mut Self, name: &str, g, args: Vec<ArgSpec>, entry: AppFn| {
            r.register(AppRegistration { name: name.into(), granularity: g, args, entry }).expect("unique builtin");
        };
        add(&mut r, "noop", Granularity::Task, vec![], Arc::new(|_| Ok(Value::Null)));
        add(
            &mut r,
            "sleep",
            Granularity::Task,
            vec![req("seconds", "how long to sleep")],
            Arc::new(|ctx| {
                let s = ctx.job.args.get("seconds").and_then(Value::as_f64).unwrap_or(0.0);
                std::thread::sleep(Duration::from_secs_f64(s.max(0.0)));
                Ok(json!({ "slept_s": s }))
            }),
        );
        add(
            &mut r,
            "fail",
            Granularity::Task,
            vec![opt("fail_times", "fail this many attempts, then succeed; default always")],
            Arc::new(|ctx| match ctx.job.arg_u64("fail_times") {
                Some(n) if u64::from(ctx.job.attempts) > n => Ok(json!({ "attempt": ctx.job.attempts })),
                _ => Err(Error::Stage(format!("deliberate failure on attempt {}", ctx.job.attempts))),
            }),
        );
        let ds = req("dataset", "dataset root directory");
        let params = opt("params", "stage parameter overrides");
        for (name, g, unit) in [
            ("montage", Granularity::Section, Some(req("section", "section index"))),
            ("align", Granularity::SectionPair, Some(req("pair", "pair index s, matching s+1 to s"))),
            ("relax", Granularity::Volume, None),
            ("mask", Granularity::Volume, None),
            ("segment", Granularity::Subvolume, Some(req("subvolume", "subvolume name i-j-k"))),
            ("reconcile", Granularity::Volume, None),
            ("mesh", Granularity::Volume, None),
            ("skeletonize", Granularity::Volume, None),
        ] {
            let mut args = vec![ds, params];
            args.extend(unit);
            let stage = name.to_string();
            add(&mut r, name, g, args, Arc::new(move |ctx| stages::run_stage_job(&stage, ctx)));
        }
        r
    }

    pub fn register(&mut self, app: AppRegistration) -> Result<()> {
        if self.apps.contains_key(&app.name) {
            return Err(Error::DuplicateApp(app.name));
        }
        self.apps.insert(app.name.clone(), app);
        Ok(())
    }

    /// Adds or replaces an app.
    pub fn with(mut self, name: &str, granularity: Granularity, entry: AppFn) -> Self {
        self.apps.insert(name.into(), AppRegistration { name: name.into(), granularity, args: vec![], entry });
        self
    }

    pub fn get(&self, name: &str) -> Option<&AppRegistration> {
        self.apps.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.apps.keys().map(String::as_str).collect()
    }
}
