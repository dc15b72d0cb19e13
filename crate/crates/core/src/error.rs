use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("dataset at {0} already exists with a different manifest")]
    ManifestConflict(PathBuf),
    #[error("no volume at {0}")]
    MissingDataset(PathBuf),
    #[error("region out of bounds on {axis} axis: {start}+{len} > {limit}")]
    OutOfBounds {
        axis: char,
        start: u64,
        len: u64,
        limit: u64,
    },
    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DtypeMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("level {0} does not exist")]
    NoSuchLevel(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("seed {index} at ({x},{y},{z}) is invalid: {reason}")]
    InvalidSeed {
        index: usize,
        x: u64,
        y: u64,
        z: u64,
        reason: String,
    },
    #[error("non-finite node position in spring mesh at node {0}")]
    NonFinite(usize),
    #[error("object {0} not present in label volume")]
    MissingObject(u32),
    #[error("inconsistent subvolume grid: {0}")]
    InconsistentGrid(String),
    #[error("label id collision: {0}")]
    IdCollision(u32),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, serde_json::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, image::ImageError> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}
