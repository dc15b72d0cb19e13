use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    CellBody,
    Vessel,
    Neurite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<SeedKind>,
}

impl Seed {
    pub fn at(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z, label: None, kind: None }
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }
}

/// Ordered seed points; serialized as a bare JSON list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedList {
    pub seeds: Vec<Seed>,
}

impl SeedList {
    pub fn new(seeds: Vec<Seed>) -> Self {
        Self { seeds }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).at(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).at(path)?;
        crate::volume::atomic_write(path, text.as_bytes())
    }

    /// Checks bounds and uniqueness of explicit labels.
    pub fn validate(&self, dims: Dims) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (index, s) in self.seeds.iter().enumerate() {
            let bad = |reason: &str| Error::InvalidSeed {
                index,
                x: s.x as u64,
                y: s.y as u64,
                z: s.z as u64,
                reason: reason.into(),
            };
            if s.x >= dims[0] || s.y >= dims[1] || s.z >= dims[2] {
                return Err(bad("outside the volume"));
            }
            if let Some(l) = s.label {
                if l == 0 {
                    return Err(bad("label 0 is background"));
                }
                if !seen.insert(l) {
                    return Err(bad("duplicate label"));
                }
            }
        }
        Ok(())
    }

    /// Label for each seed: its explicit label, or the smallest id not
    /// claimed explicitly, handed out in seed order.
    pub(crate) fn resolved_labels(&self) -> Vec<u32> {
        let taken: std::collections::HashSet<u32> = self.seeds.iter().filter_map(|s| s.label).collect();
        let mut next = 1u32;
        self.seeds
            .iter()
            .map(|s| match s.label {
                Some(l) => l,
                None => {
                    while taken.contains(&next) {
                        next += 1;
                    }
                    next += 1;
                    next - 1
                }
            })
            .collect()
    }
}
