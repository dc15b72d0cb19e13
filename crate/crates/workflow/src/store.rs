use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::apps::AppRegistry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Created,
    Ready,
    Running,
    Done,
    Failed,
    Killed,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Created,
        JobState::Ready,
        JobState::Running,
        JobState::Done,
        JobState::Failed,
        JobState::Killed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Created => "CREATED",
            JobState::Ready => "READY",
            JobState::Running => "RUNNING",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
            JobState::Killed => "KILLED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Killed)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown job state {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub app: String,
    pub args: Map<String, Value>,
    pub deps: Vec<String>,
    pub state: JobState,
    pub attempts: u32,
    pub max_attempts: u32,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub worker_id: Option<String>,
    pub workdir: PathBuf,
    pub tags: BTreeMap<String, String>,
    pub lease_expires: Option<DateTime<Utc>>,
    pub detail: Option<String>,
}

impl JobRecord {
    pub fn arg_str(&self, key: &str) -> Option<&str> {
        self.args.get(key).and_then(Value::as_str)
    }

    pub fn arg_u64(&self, key: &str) -> Option<u64> {
        self.args.get(key).and_then(Value::as_u64)
    }

    pub fn wall_time_s(&self) -> Option<f64> {
        Some((self.finished_at? - self.started_at?).num_microseconds()? as f64 / 1e6)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub seq: i64,
    pub job_id: String,
    pub from: Option<JobState>,
    pub to: JobState,
    pub at: DateTime<Utc>,
    pub worker_id: Option<String>,
    pub detail: Option<String>,
}

/// What to submit. Defaults: no deps, no tags, three attempts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub app: String,
    #[serde(default)]
    pub args: Map<String, Value>,
    #[serde(default)]
    pub deps: Vec<String>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_attempts() -> u32 {
    3
}

impl JobSpec {
    pub fn new(app: impl Into<String>) -> Self {
        Self { app: app.into(), args: Map::new(), deps: Vec::new(), tags: BTreeMap::new(), max_attempts: 3 }
    }

    pub fn arg(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.args.insert(key.to_string(), value.into());
        self
    }

    pub fn dep(mut self, id: impl Into<String>) -> Self {
        self.deps.push(id.into());
        self
    }

    pub fn deps(mut self, ids: impl IntoIterator<Item = String>) -> Self {
        self.deps.extend(ids);
        self
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobFilter {
    pub state: Option<JobState>,
    /// `(key, value)` tag that must match exactly.
    pub tag: Option<(String, String)>,
    pub app: Option<String>,
}

impl JobFilter {
    /// Parses `key=value`.
    pub fn parse_tag(s: &str) -> Result<(String, String)> {
        s.split_once('=')
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .ok_or_else(|| Error::Config(format!("tag filter {s:?} is not key=value")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Lease = `lease_factor` times the app's moving-average runtime.
    pub lease_factor: f64,
    pub lease_min_s: f64,
    /// Job working directories live under this root; defaults next to the
    /// database file.
    pub workdir_root: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { lease_factor: 10.0, lease_min_s: 60.0, workdir_root: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSample {
    pub t_s: f64,
    pub workers: usize,
    pub ready: usize,
    pub running: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LauncherStatus {
    pub paused: bool,
    pub active: bool,
    pub workers: usize,
    pub min_workers: usize,
    pub max_workers: usize,
    pub updated_at: Option<DateTime<Utc>>,
    pub timeline: Vec<PoolSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub root: PathBuf,
    pub registered_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub dataset: String,
    pub section: u32,
    /// Montage status (`OK`, `SUSPECT`, `FAIL`) once montaged.
    pub status: Option<String>,
    pub verdict: Option<String>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub spec: Value,
    pub report: Value,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY,
    id TEXT UNIQUE NOT NULL,
    app TEXT NOT NULL,
    args TEXT NOT NULL,
    state TEXT NOT NULL,
    attempts INTEGER NOT NULL,
    max_attempts INTEGER NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    started_at TEXT,
    finished_at TEXT,
    worker_id TEXT,
    workdir TEXT NOT NULL,
    tags TEXT NOT NULL,
    lease_expires TEXT,
    detail TEXT
);
CREATE INDEX IF NOT EXISTS jobs_state ON jobs(state, seq);
CREATE TABLE IF NOT EXISTS job_deps (
    job_id TEXT NOT NULL,
    dep_id TEXT NOT NULL,
    PRIMARY KEY (job_id, dep_id)
);
CREATE INDEX IF NOT EXISTS job_deps_dep ON job_deps(dep_id);
CREATE TABLE IF NOT EXISTS transitions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id TEXT NOT NULL,
    from_state TEXT,
    to_state TEXT NOT NULL,
    at TEXT NOT NULL,
    worker_id TEXT,
    detail TEXT
);
CREATE INDEX IF NOT EXISTS transitions_job ON transitions(job_id);
CREATE TABLE IF NOT EXISTS workers (
    id TEXT PRIMARY KEY,
    registered_at TEXT NOT NULL,
    last_seen TEXT NOT NULL,
    retired_at TEXT
);
CREATE TABLE IF NOT EXISTS app_stats (
    app TEXT PRIMARY KEY,
    runs INTEGER NOT NULL,
    mean_s REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS launcher (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS pool_samples (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    t_s REAL NOT NULL,
    workers INTEGER NOT NULL,
    ready INTEGER NOT NULL,
    running INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS datasets (
    name TEXT PRIMARY KEY,
    root TEXT NOT NULL,
    registered_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sections (
    dataset TEXT NOT NULL,
    section INTEGER NOT NULL,
    status TEXT,
    verdict TEXT,
    updated_at TEXT NOT NULL,
    PRIMARY KEY (dataset, section)
);
CREATE TABLE IF NOT EXISTS sweeps (
    id TEXT PRIMARY KEY,
    created_at TEXT NOT NULL,
    spec TEXT NOT NULL,
    report TEXT NOT NULL
);
";

/// Moving-average weight of the newest runtime.
const RUNTIME_EMA: f64 = 0.3;
const TIMELINE_KEEP: i64 = 2000;

pub fn now() -> DateTime<Utc> {
    Utc::now()
}

/// Fixed-width UTC timestamp; lexicographic order equals time order.
pub fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn parse_ts(s: &str) -> rusqlite::Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
}

fn opt_ts(s: Option<String>) -> rusqlite::Result<Option<DateTime<Utc>>> {
    s.as_deref().map(parse_ts).transpose()
}

fn json_col<T: serde::de::DeserializeOwned>(s: &str) -> rusqlite::Result<T> {
    serde_json::from_str(s)
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
}

fn state_col(s: &str) -> rusqlite::Result<JobState> {
    s.parse()
        .map_err(|e: Error| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, e.into()))
}

const JOB_COLS: &str = "id, app, args, state, attempts, max_attempts, created_at, updated_at, started_at, \
                        finished_at, worker_id, workdir, tags, lease_expires, detail";

fn job_from_row(row: &Row<'_>) -> rusqlite::Result<JobRecord> {
    Ok(JobRecord {
        id: row.get(0)?,
        app: row.get(1)?,
        args: json_col(&row.get::<_, String>(2)?)?,
        deps: Vec::new(),
        state: state_col(&row.get::<_, String>(3)?)?,
        attempts: row.get(4)?,
        max_attempts: row.get(5)?,
        created_at: parse_ts(&row.get::<_, String>(6)?)?,
        updated_at: parse_ts(&row.get::<_, String>(7)?)?,
        started_at: opt_ts(row.get(8)?)?,
        finished_at: opt_ts(row.get(9)?)?,
        worker_id: row.get(10)?,
        workdir: PathBuf::from(row.get::<_, String>(11)?),
        tags: json_col(&row.get::<_, String>(12)?)?,
        lease_expires: opt_ts(row.get(13)?)?,
        detail: row.get(14)?,
    })
}

/// SQLite-backed job database. Every state change is an immediate
/// transaction, so several stores opened on the same file (one per worker
/// thread or process) can claim concurrently without double claims.
pub struct JobStore {
    conn: Mutex<Connection>,
    path: PathBuf,
    config: StoreConfig,
    apps: Arc<AppRegistry>,
}

impl JobStore {
    /// Opens with the built-in app registry and default configuration.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, StoreConfig::default(), Arc::new(AppRegistry::builtin()))
    }

    pub fn open_with(path: impl AsRef<Path>, config: StoreConfig, apps: Arc<AppRegistry>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(crate::error::io_at(dir))?;
        }
        let conn = Connection::open(&path)?;
        conn.busy_timeout(Duration::from_secs(60))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn), path, config, apps })
    }

    /// A second handle on the same database with its own connection.
    pub fn reopen(&self) -> Result<Self> {
        Self::open_with(&self.path, self.config.clone(), self.apps.clone())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn apps(&self) -> &Arc<AppRegistry> {
        &self.apps
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn workdir_for(&self, id: &str) -> PathBuf {
        let root = self.config.workdir_root.clone().unwrap_or_else(|| {
            let parent = self.path.parent().unwrap_or(Path::new("."));
            parent.join("jobs")
        });
        root.join(id)
    }

    // ---- jobs ----

    pub fn submit(&self, spec: JobSpec) -> Result<JobRecord> {
        let reg = self.apps.get(&spec.app).ok_or_else(|| Error::UnknownApp(spec.app.clone()))?;
        for a in reg.args.iter().filter(|a| a.required) {
            if !spec.args.contains_key(a.name) {
                return Err(Error::MissingArg { app: spec.app.clone(), arg: a.name.to_string() });
            }
        }
        if spec.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        let id = self.write(|tx| {
            let mut all_done = true;
            for d in &spec.deps {
                let st: Option<String> =
                    tx.query_row("SELECT state FROM jobs WHERE id = ?1", [d], |r| r.get(0)).optional()?;
                match st {
                    None => return Err(Error::MissingDep(d.clone())),
                    Some(s) => all_done &= s == JobState::Done.as_str(),
                }
            }
            let seq: i64 = tx.query_row("SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs", [], |r| r.get(0))?;
            let id = format!("j{seq:06}");
            let t = ts(now());
            tx.execute(
                "INSERT INTO jobs (seq, id, app, args, state, attempts, max_attempts, created_at, updated_at, workdir, tags)
                 VALUES (?1, ?2, ?3, ?4, ?5, 0, ?6, ?7, ?7, ?8, ?9)",
                params![
                    seq,
                    id,
                    spec.app,
                    serde_json::to_string(&spec.args)?,
                    JobState::Created.as_str(),
                    spec.max_attempts,
                    t,
                    self.workdir_for(&id).to_string_lossy(),
                    serde_json::to_string(&spec.tags)?,
                ],
            )?;
            let mut deps = spec.deps.clone();
            deps.sort();
            deps.dedup();
            for d in &deps {
                tx.execute("INSERT INTO job_deps (job_id, dep_id) VALUES (?1, ?2)", params![id, d])?;
            }
            log_transition(tx, &id, None, JobState::Created, None, None)?;
            if all_done {
                set_state(tx, &id, JobState::Created, JobState::Ready, None, None)?;
            }
            Ok(id)
        })?;
        self.get(&id)
    }

    pub fn get(&self, id: &str) -> Result<JobRecord> {
        let conn = self.conn();
        let mut job = conn
            .query_row(&format!("SELECT {JOB_COLS} FROM jobs WHERE id = ?1"), [id], job_from_row)
            .optional()?
            .ok_or_else(|| Error::NoSuchJob(id.to_string()))?;
        job.deps = deps_of(&conn, id)?;
        Ok(job)
    }

    /// Jobs in submission order.
    pub fn list(&self, filter: &JobFilter) -> Result<Vec<JobRecord>> {
        let conn = self.conn();
        let mut sql = format!("SELECT {JOB_COLS} FROM jobs WHERE 1=1");
        let mut args: Vec<String> = Vec::new();
        if let Some(s) = filter.state {
            args.push(s.as_str().to_string());
            sql.push_str(&format!(" AND state = ?{}", args.len()));
        }
        if let Some(app) = &filter.app {
            args.push(app.clone());
            sql.push_str(&format!(" AND app = ?{}", args.len()));
        }
        sql.push_str(" ORDER BY seq");
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt.query_map(rusqlite::params_from_iter(args.iter()), job_from_row)?;
        let mut out = Vec::new();
        for r in rows {
            let mut job = r?;
            if let Some((k, v)) = &filter.tag {
                if job.tags.get(k) != Some(v) {
                    continue;
                }
            }
            job.deps = deps_of(&conn, &job.id)?;
            out.push(job);
        }
        Ok(out)
    }

    pub fn counts(&self) -> Result<BTreeMap<JobState, usize>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT state, COUNT(*) FROM jobs GROUP BY state")?;
        let mut out: BTreeMap<JobState, usize> = JobState::ALL.iter().map(|s| (*s, 0)).collect();
        for r in stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))? {
            let (s, n) = r?;
            out.insert(state_col(&s)?, n as usize);
        }
        Ok(out)
    }

    pub fn count_in(&self, state: JobState) -> Result<usize> {
        let n: i64 =
            self.conn().query_row("SELECT COUNT(*) FROM jobs WHERE state = ?1", [state.as_str()], |r| r.get(0))?;
        Ok(n as usize)
    }

    /// Transition log of one job, oldest first.
    pub fn transitions(&self, id: &str) -> Result<Vec<Transition>> {
        self.transitions_where("WHERE job_id = ?1", &[id])
    }

    /// Whole transition log in commit order.
    pub fn all_transitions(&self) -> Result<Vec<Transition>> {
        self.transitions_where("", &[])
    }

    fn transitions_where(&self, clause: &str, args: &[&str]) -> Result<Vec<Transition>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT seq, job_id, from_state, to_state, at, worker_id, detail FROM transitions {clause} ORDER BY seq"
        ))?;
        let rows = stmt.query_map(rusqlite::params_from_iter(args.iter()), |r| {
            Ok(Transition {
                seq: r.get(0)?,
                job_id: r.get(1)?,
                from: r.get::<_, Option<String>>(2)?.as_deref().map(state_col).transpose()?,
                to: state_col(&r.get::<_, String>(3)?)?,
                at: parse_ts(&r.get::<_, String>(4)?)?,
                worker_id: r.get(5)?,
                detail: r.get(6)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Atomically moves the oldest READY job to RUNNING for `worker_id`.
    pub fn claim_next(&self, worker_id: &str) -> Result<Option<JobRecord>> {
        let claimed = self.write(|tx| {
            let active: Option<Option<String>> = tx
                .query_row("SELECT retired_at FROM workers WHERE id = ?1", [worker_id], |r| r.get(0))
                .optional()?;
            if !matches!(active, Some(None)) {
                return Err(Error::UnknownWorker(worker_id.to_string()));
            }
            let Some((id, app)): Option<(String, String)> = tx
                .query_row(
                    "SELECT id, app FROM jobs WHERE state = 'READY' ORDER BY seq LIMIT 1",
                    [],
                    |r| Ok((r.get(0)?, r.get(1)?)),
                )
                .optional()?
            else {
                return Ok(None);
            };
            let t = now();
            let lease = lease_seconds(tx, &app, &self.config)?;
            let expires = t + chrono::Duration::microseconds((lease * 1e6) as i64);
            let changed = tx.execute(
                "UPDATE jobs SET state = 'RUNNING', worker_id = ?2, attempts = attempts + 1, started_at = ?3,
                 finished_at = NULL, lease_expires = ?4, updated_at = ?3 WHERE id = ?1 AND state = 'READY'",
                params![id, worker_id, ts(t), ts(expires)],
            )?;
            if changed != 1 {
                return Ok(None);
            }
            log_transition(tx, &id, Some(JobState::Ready), JobState::Running, Some(worker_id), None)?;
            tx.execute("UPDATE workers SET last_seen = ?2 WHERE id = ?1", params![worker_id, ts(t)])?;
            Ok(Some(id))
        })?;
        claimed.map(|id| self.get(&id)).transpose()
    }

    /// Finishes a RUNNING job held by `worker_id`.
    pub fn complete(&self, id: &str, worker_id: &str, outcome: Outcome, detail: Option<&str>) -> Result<JobRecord> {
        self.write(|tx| {
            let (state, holder, app, started, attempts, max): (String, Option<String>, String, Option<String>, u32, u32) =
                tx.query_row(
                    "SELECT state, worker_id, app, started_at, attempts, max_attempts FROM jobs WHERE id = ?1",
                    [id],
                    |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?)),
                )
                .optional()?
                .ok_or_else(|| Error::NoSuchJob(id.to_string()))?;
            let state = state_col(&state)?;
            let target = match outcome {
                Outcome::Done => JobState::Done,
                Outcome::Failed => JobState::Failed,
            };
            if state != JobState::Running {
                return Err(Error::InvalidTransition { id: id.to_string(), from: state, to: target });
            }
            if holder.as_deref() != Some(worker_id) {
                return Err(Error::NotOwner { id: id.to_string(), worker: worker_id.to_string() });
            }
            let t = now();
            tx.execute(
                "UPDATE jobs SET finished_at = ?2, lease_expires = NULL, detail = ?3 WHERE id = ?1",
                params![id, ts(t), detail],
            )?;
            if let Some(start) = opt_ts(started)? {
                record_runtime(tx, &app, (t - start).num_microseconds().unwrap_or(0) as f64 / 1e6)?;
            }
            set_state(tx, id, JobState::Running, target, Some(worker_id), detail)?;
            match outcome {
                Outcome::Done => promote_dependents(tx, id)?,
                Outcome::Failed if attempts < max => {
                    tx.execute("UPDATE jobs SET worker_id = NULL WHERE id = ?1", [id])?;
                    set_state(tx, id, JobState::Failed, JobState::Ready, None, Some("retry"))?;
                }
                Outcome::Failed => {}
            }
            Ok(())
        })?;
        self.get(id)
    }

    /// Any non-terminal job becomes KILLED.
    pub fn kill(&self, id: &str) -> Result<JobRecord> {
        self.write(|tx| {
            let state: String = tx
                .query_row("SELECT state FROM jobs WHERE id = ?1", [id], |r| r.get(0))
                .optional()?
                .ok_or_else(|| Error::NoSuchJob(id.to_string()))?;
            let state = state_col(&state)?;
            if state.is_terminal() {
                return Err(Error::InvalidTransition { id: id.to_string(), from: state, to: JobState::Killed });
            }
            tx.execute("UPDATE jobs SET lease_expires = NULL WHERE id = ?1", [id])?;
            set_state(tx, id, state, JobState::Killed, None, Some("killed"))
        })?;
        self.get(id)
    }

    /// Submits a copy of `id` with `overrides` merged into its args. Deps
    /// are copied and the new job is tagged `rerun_of`. A repeated
    /// `client_token` returns the job created by the first request.
    pub fn rerun(&self, id: &str, overrides: &Map<String, Value>, client_token: Option<&str>) -> Result<JobRecord> {
        if let Some(tok) = client_token {
            let filter = JobFilter { tag: Some(("client_token".into(), tok.into())), ..JobFilter::default() };
            if let Some(existing) = self.list(&filter)?.into_iter().next() {
                return Ok(existing);
            }
        }
        let orig = self.get(id)?;
        let mut args = orig.args.clone();
        merge_args(&mut args, overrides);
        let mut spec = JobSpec::new(orig.app.clone()).deps(orig.deps.clone()).max_attempts(orig.max_attempts);
        spec.args = args;
        spec.tags = orig.tags.clone();
        spec.tags.remove("client_token");
        spec.tags.insert("rerun_of".into(), orig.id.clone());
        if let Some(tok) = client_token {
            spec.tags.insert("client_token".into(), tok.into());
        }
        self.submit(spec)
    }

    /// Returns RUNNING jobs whose lease expired to READY (through FAILED,
    /// counting the lost attempt), or to terminal FAILED when out of
    /// attempts. Returns the affected ids.
    pub fn recover_stale(&self, at: DateTime<Utc>) -> Result<Vec<String>> {
        self.write(|tx| {
            let stale: Vec<(String, u32, u32)> = {
                let mut stmt = tx.prepare(
                    "SELECT id, attempts, max_attempts FROM jobs
                     WHERE state = 'RUNNING' AND lease_expires IS NOT NULL AND lease_expires < ?1",
                )?;
                let rows = stmt.query_map([ts(at)], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            for (id, attempts, max) in &stale {
                tx.execute(
                    "UPDATE jobs SET lease_expires = NULL, worker_id = NULL, detail = 'lease expired' WHERE id = ?1",
                    [id],
                )?;
                set_state(tx, id, JobState::Running, JobState::Failed, None, Some("lease expired"))?;
                if attempts < max {
                    set_state(tx, id, JobState::Failed, JobState::Ready, None, Some("retry"))?;
                }
            }
            Ok(stale.into_iter().map(|s| s.0).collect())
        })
    }

    pub fn lease_seconds(&self, app: &str) -> Result<f64> {
        let conn = self.conn();
        let mean: Option<f64> =
            conn.query_row("SELECT mean_s FROM app_stats WHERE app = ?1", [app], |r| r.get(0)).optional()?;
        Ok(lease_from_mean(mean, &self.config))
    }

    pub fn mean_runtime(&self, app: &str) -> Result<Option<f64>> {
        Ok(self
            .conn()
            .query_row("SELECT mean_s FROM app_stats WHERE app = ?1", [app], |r| r.get(0))
            .optional()?)
    }

    // ---- workers ----

    pub fn register_worker(&self, id: &str) -> Result<()> {
        let t = ts(now());
        self.write(|tx| {
            tx.execute(
                "INSERT INTO workers (id, registered_at, last_seen) VALUES (?1, ?2, ?2)
                 ON CONFLICT(id) DO UPDATE SET last_seen = ?2, retired_at = NULL",
                params![id, t],
            )?;
            Ok(())
        })
    }

    pub fn retire_worker(&self, id: &str) -> Result<()> {
        let t = ts(now());
        self.write(|tx| {
            tx.execute("UPDATE workers SET retired_at = ?2, last_seen = ?2 WHERE id = ?1", params![id, t])?;
            Ok(())
        })
    }

    // ---- launcher ----

    fn launcher_get(&self, key: &str) -> Result<Option<Value>> {
        let s: Option<String> =
            self.conn().query_row("SELECT value FROM launcher WHERE key = ?1", [key], |r| r.get(0)).optional()?;
        Ok(s.map(|s| serde_json::from_str(&s)).transpose()?)
    }

    fn launcher_set(&self, key: &str, value: Value) -> Result<()> {
        let v = serde_json::to_string(&value)?;
        self.write(|tx| {
            tx.execute(
                "INSERT INTO launcher (key, value) VALUES (?1, ?2) ON CONFLICT(key) DO UPDATE SET value = ?2",
                params![key, v],
            )?;
            Ok(())
        })
    }

    pub fn set_paused(&self, paused: bool) -> Result<()> {
        self.launcher_set("paused", Value::Bool(paused))
    }

    pub fn paused(&self) -> Result<bool> {
        Ok(self.launcher_get("paused")?.and_then(|v| v.as_bool()).unwrap_or(false))
    }

    /// Records that a launcher started with these bounds and clears the
    /// previous timeline.
    pub fn launcher_started(&self, min_workers: usize, max_workers: usize) -> Result<()> {
        self.write(|tx| {
            tx.execute("DELETE FROM pool_samples", [])?;
            Ok(())
        })?;
        self.launcher_set("bounds", serde_json::json!([min_workers, max_workers]))?;
        self.launcher_set("active", Value::Bool(true))?;
        self.launcher_set("updated_at", Value::String(ts(now())))
    }

    pub fn launcher_stopped(&self) -> Result<()> {
        self.launcher_set("active", Value::Bool(false))?;
        self.launcher_set("workers", Value::from(0))?;
        self.launcher_set("updated_at", Value::String(ts(now())))
    }

    pub fn record_pool_sample(&self, s: PoolSample) -> Result<()> {
        self.write(|tx| {
            tx.execute(
                "INSERT INTO pool_samples (t_s, workers, ready, running) VALUES (?1, ?2, ?3, ?4)",
                params![s.t_s, s.workers as i64, s.ready as i64, s.running as i64],
            )?;
            tx.execute(
                "DELETE FROM pool_samples WHERE seq <= (SELECT MAX(seq) FROM pool_samples) - ?1",
                [TIMELINE_KEEP],
            )?;
            Ok(())
        })?;
        self.launcher_set("workers", Value::from(s.workers))?;
        self.launcher_set("updated_at", Value::String(ts(now())))
    }

    pub fn launcher_status(&self) -> Result<LauncherStatus> {
        let bounds = self.launcher_get("bounds")?.unwrap_or(serde_json::json!([0, 0]));
        let timeline = {
            let conn = self.conn();
            let mut stmt = conn.prepare("SELECT t_s, workers, ready, running FROM pool_samples ORDER BY seq")?;
            let rows = stmt.query_map([], |r| {
                Ok(PoolSample {
                    t_s: r.get(0)?,
                    workers: r.get::<_, i64>(1)? as usize,
                    ready: r.get::<_, i64>(2)? as usize,
                    running: r.get::<_, i64>(3)? as usize,
                })
            })?;
            rows.collect::<rusqlite::Result<Vec<_>>>()?
        };
        let updated_at = self
            .launcher_get("updated_at")?
            .and_then(|v| v.as_str().map(str::to_string))
            .and_then(|s| parse_ts(&s).ok());
        Ok(LauncherStatus {
            paused: self.paused()?,
            active: self.launcher_get("active")?.and_then(|v| v.as_bool()).unwrap_or(false),
            workers: self.launcher_get("workers")?.and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            min_workers: bounds[0].as_u64().unwrap_or(0) as usize,
            max_workers: bounds[1].as_u64().unwrap_or(0) as usize,
            updated_at,
            timeline,
        })
    }

    // ---- datasets and sections ----

    pub fn register_dataset(&self, name: &str, root: &Path) -> Result<DatasetEntry> {
        let t = now();
        self.write(|tx| {
            tx.execute(
                "INSERT INTO datasets (name, root, registered_at) VALUES (?1, ?2, ?3)
                 ON CONFLICT(name) DO UPDATE SET root = ?2",
                params![name, root.to_string_lossy(), ts(t)],
            )?;
            Ok(())
        })?;
        self.dataset(name)
    }

    pub fn dataset(&self, name: &str) -> Result<DatasetEntry> {
        self.datasets()?
            .into_iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::NoSuchDataset(name.to_string()))
    }

    pub fn datasets(&self) -> Result<Vec<DatasetEntry>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT name, root, registered_at FROM datasets ORDER BY name")?;
        let rows = stmt.query_map([], |r| {
            Ok(DatasetEntry {
                name: r.get(0)?,
                root: PathBuf::from(r.get::<_, String>(1)?),
                registered_at: parse_ts(&r.get::<_, String>(2)?)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Registers a section; false when it was already known.
    pub fn add_section(&self, dataset: &str, section: u32) -> Result<bool> {
        let t = ts(now());
        self.write(|tx| {
            let n = tx.execute(
                "INSERT OR IGNORE INTO sections (dataset, section, updated_at) VALUES (?1, ?2, ?3)",
                params![dataset, section, t],
            )?;
            Ok(n == 1)
        })
    }

    pub fn set_section_status(&self, dataset: &str, section: u32, status: &str) -> Result<()> {
        let t = ts(now());
        self.write(|tx| {
            tx.execute(
                "INSERT INTO sections (dataset, section, status, updated_at) VALUES (?1, ?2, ?3, ?4)
                 ON CONFLICT(dataset, section) DO UPDATE SET status = ?3, updated_at = ?4",
                params![dataset, section, status, t],
            )?;
            Ok(())
        })
    }

    pub fn set_section_verdict(&self, dataset: &str, section: u32, verdict: &str) -> Result<()> {
        let t = ts(now());
        self.write(|tx| {
            tx.execute(
                "INSERT INTO sections (dataset, section, verdict, updated_at) VALUES (?1, ?2, ?3, ?4)
                 ON CONFLICT(dataset, section) DO UPDATE SET verdict = ?3, updated_at = ?4",
                params![dataset, section, verdict, t],
            )?;
            Ok(())
        })
    }

    /// Sections with FAIL status first, then SUSPECT, then the rest; by
    /// index within each group.
    pub fn sections(&self, dataset: &str) -> Result<Vec<SectionEntry>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT dataset, section, status, verdict, updated_at FROM sections WHERE dataset = ?1
             ORDER BY CASE status WHEN 'FAIL' THEN 0 WHEN 'SUSPECT' THEN 1 ELSE 2 END, section",
        )?;
        let rows = stmt.query_map([dataset], |r| {
            Ok(SectionEntry {
                dataset: r.get(0)?,
                section: r.get(1)?,
                status: r.get(2)?,
                verdict: r.get(3)?,
                updated_at: parse_ts(&r.get::<_, String>(4)?)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    // ---- sweeps ----

    pub fn save_sweep(&self, spec: &Value, report: &Value) -> Result<String> {
        let t = now();
        self.write(|tx| {
            let n: i64 = tx.query_row("SELECT COUNT(*) FROM sweeps", [], |r| r.get(0))?;
            let id = format!("s{:04}", n + 1);
            tx.execute(
                "INSERT INTO sweeps (id, created_at, spec, report) VALUES (?1, ?2, ?3, ?4)",
                params![id, ts(t), serde_json::to_string(spec)?, serde_json::to_string(report)?],
            )?;
            Ok(id)
        })
    }

    pub fn sweep(&self, id: &str) -> Result<Option<SweepEntry>> {
        Ok(self.sweeps()?.into_iter().find(|s| s.id == id))
    }

    pub fn sweeps(&self) -> Result<Vec<SweepEntry>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT id, created_at, spec, report FROM sweeps ORDER BY id")?;
        let rows = stmt.query_map([], |r| {
            Ok(SweepEntry {
                id: r.get(0)?,
                created_at: parse_ts(&r.get::<_, String>(1)?)?,
                spec: json_col(&r.get::<_, String>(2)?)?,
                report: json_col(&r.get::<_, String>(3)?)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

/// Shallow merge; `null` removes a key.
pub fn merge_args(args: &mut Map<String, Value>, overrides: &Map<String, Value>) {
    for (k, v) in overrides {
        match (args.get_mut(k), v) {
            (_, Value::Null) => {
                args.remove(k);
            }
            (Some(Value::Object(dst)), Value::Object(src)) => merge_args(dst, src),
            _ => {
                args.insert(k.clone(), v.clone());
            }
        }
    }
}

fn deps_of(conn: &Connection, id: &str) -> Result<Vec<String>> {
    let mut stmt = conn.prepare_cached("SELECT dep_id FROM job_deps WHERE job_id = ?1 ORDER BY dep_id")?;
    let rows = stmt.query_map([id], |r| r.get(0))?;
    Ok(rows.collect::<rusqlite::Result<_>>()?)
}

fn log_transition(
    tx: &Transaction<'_>,
    id: &str,
    from: Option<JobState>,
    to: JobState,
    worker: Option<&str>,
    detail: Option<&str>,
) -> Result<()> {
    tx.execute(
        "INSERT INTO transitions (job_id, from_state, to_state, at, worker_id, detail) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![id, from.map(JobState::as_str), to.as_str(), ts(now()), worker, detail],
    )?;
    Ok(())
}

fn set_state(
    tx: &Transaction<'_>,
    id: &str,
    from: JobState,
    to: JobState,
    worker: Option<&str>,
    detail: Option<&str>,
) -> Result<()> {
    let n = tx.execute(
        "UPDATE jobs SET state = ?3, updated_at = ?4 WHERE id = ?1 AND state = ?2",
        params![id, from.as_str(), to.as_str(), ts(now())],
    )?;
    if n != 1 {
        return Err(Error::InvalidTransition { id: id.to_string(), from, to });
    }
    log_transition(tx, id, Some(from), to, worker, detail)
}

fn promote_dependents(tx: &Transaction<'_>, id: &str) -> Result<()> {
    let waiting: Vec<String> = {
        let mut stmt = tx.prepare(
            "SELECT j.id FROM job_deps d JOIN jobs j ON j.id = d.job_id
             WHERE d.dep_id = ?1 AND j.state = 'CREATED'
             AND NOT EXISTS (SELECT 1 FROM job_deps d2 JOIN jobs j2 ON j2.id = d2.dep_id
                             WHERE d2.job_id = j.id AND j2.state != 'DONE')
             ORDER BY j.seq",
        )?;
        let rows = stmt.query_map([id], |r| r.get(0))?;
        rows.collect::<rusqlite::Result<_>>()?
    };
    for w in waiting {
        set_state(tx, &w, JobState::Created, JobState::Ready, None, None)?;
    }
    Ok(())
}

fn lease_from_mean(mean: Option<f64>, cfg: &StoreConfig) -> f64 {
    mean.map_or(cfg.lease_min_s, |m| (cfg.lease_factor * m).max(cfg.lease_min_s))
}

fn lease_seconds(tx: &Transaction<'_>, app: &str, cfg: &StoreConfig) -> Result<f64> {
    let mean: Option<f64> =
        tx.query_row("SELECT mean_s FROM app_stats WHERE app = ?1", [app], |r| r.get(0)).optional()?;
    Ok(lease_from_mean(mean, cfg))
}

fn record_runtime(tx: &Transaction<'_>, app: &str, secs: f64) -> Result<()> {
    tx.execute(
        "INSERT INTO app_stats (app, runs, mean_s) VALUES (?1, 1, ?2)
         ON CONFLICT(app) DO UPDATE SET runs = runs + 1, mean_s = mean_s + ?3 * (?2 - mean_s)",
        params![app, secs, RUNTIME_EMA],
    )?;
    Ok(())
}
