use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dtype, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Subvolume([usize; 3]),
    Global,
}

/// Label32 grid; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: VoxelGrid,
    pub provenance: Provenance,
}

impl LabelVolume {
    pub fn new(grid: VoxelGrid, provenance: Provenance) -> Result<Self> {
        if grid.dtype() != Dtype::Label32 {
            return Err(Error::DtypeMismatch {
                expected: Dtype::Label32.name(),
                actual: grid.dtype().name(),
            });
        }
        Ok(Self { grid, provenance })
    }

    pub fn labels(&self) -> &[u32] {
        self.grid.labels().expect("label volume holds label32")
    }

    /// Distinct nonzero labels in ascending order.
    pub fn label_set(&self) -> Vec<u32> {
        let set: std::collections::BTreeSet<u32> = self.labels().iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }
}

/// Renumbers labels by order of first appearance in the x-fastest scan so
/// that label maps equal up to permutation become identical.
pub fn canonical_relabel(labels: &[u32]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let next = map.len() as u32 + 1;
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub(crate) const NEIGHBORS6: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Face neighbors of `index` inside `dims`.
pub(crate) fn neighbors6(dims: [usize; 3], index: usize) -> impl Iterator<Item = usize> {
    let x = index % dims[0];
    let y = (index / dims[0]) % dims[1];
    let z = index / (dims[0] * dims[1]);
    NEIGHBORS6.into_iter().filter_map(move |d| {
        let (nx, ny, nz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
        (nx >= 0 && ny >= 0 && nz >= 0 && (nx as usize) < dims[0] && (ny as usize) < dims[1] && (nz as usize) < dims[2])
            .then(|| (nz as usize * dims[1] + ny as usize) * dims[0] + nx as usize)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relabel_by_first_appearance() {
        assert_eq!(canonical_relabel(&[0, 7, 7, 3, 0, 9, 3]), vec![0, 1, 1, 2, 0, 3, 2]);
    }

    #[test]
    fn neighbor_counts() {
        let dims = [3, 3, 3];
        assert_eq!(neighbors6(dims, 0).count(), 3);
        assert_eq!(neighbors6(dims, 13).count(), 6);
    }
}
