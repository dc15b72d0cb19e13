//! Workflow layer: a SQLite job store with dependencies and a six-state
//! lifecycle, an elastic worker-pool launcher, pipeline assembly over a
//! dataset directory, montage parameter sweeps, online ingestion and the
//! HTTP API used by the operator console.

pub mod api;
pub mod apps;
pub mod dataset;
pub mod error;
pub mod ingest;
pub mod launcher;
pub mod pipeline;
pub mod stages;
pub mod store;
pub mod sweep;

pub use apps::{AppRegistration, AppRegistry, Granularity, JobContext};
pub use dataset::{Dataset, DatasetInfo, SyntheticSpec};
pub use error::{Error, Result};
pub use launcher::{run_launcher, run_launcher_until, LauncherOptions, LauncherSummary, PoolPolicy, StopReason};
pub use pipeline::{define_pipeline, PipelineConfig, StageConfig};
pub use store::{JobFilter, JobRecord, JobSpec, JobState, JobStore, Outcome, StoreConfig};
