use std::path::PathBuf;

use thiserror::Error;

use crate::store::JobState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("job store: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error(transparent)]
    Core(#[from] emflow_core::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown app {0:?}")]
    UnknownApp(String),
    #[error("app {0:?} registered twice")]
    DuplicateApp(String),
    #[error("missing argument {arg:?} for app {app:?}")]
    MissingArg { app: String, arg: String },
    #[error("dependency {0} does not exist")]
    MissingDep(String),
    #[error("no job {0}")]
    NoSuchJob(String),
    #[error("job {id}: cannot move from {from} to {to}")]
    InvalidTransition { id: String, from: JobState, to: JobState },
    #[error("job {id} is not held by worker {worker}")]
    NotOwner { id: String, worker: String },
    #[error("worker {0} is not registered")]
    UnknownWorker(String),
    #[error("no dataset {0}")]
    NoSuchDataset(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Stage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
