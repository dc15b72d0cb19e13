use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// How mask objects map to output ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskIds {
    /// Mask label `m` becomes `max segment id + m`.
    AboveSegments,
    /// Explicit mask label to output id map.
    Explicit(BTreeMap<u32, u32>),
}

/// Overlays mask objects on a segmentation. Masked voxels take the mask
/// object's reserved id; other voxels keep their segment label.
pub fn apply_mask(labels: &VoxelGrid, mask: &VoxelGrid, ids: &MaskIds) -> Result<VoxelGrid> {
    if labels.dims() != mask.dims() {
        return Err(Error::InvalidArgument(format!(
            "mask dims {:?} differ from labels {:?}",
            mask.dims(),
            labels.dims()
        )));
    }
    let seg = labels.labels()?;
    let m = mask.labels()?;
    let max_seg = seg.iter().copied().max().unwrap_or(0);
    let reserved = |l: u32| -> Result<u32> {
        match ids {
            MaskIds::AboveSegments => max_seg.checked_add(l).ok_or(Error::IdCollision(l)),
            MaskIds::Explicit(map) => map
                .get(&l)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no reserved id for mask label {l}"))),
        }
    };
    let mut resolved = BTreeMap::new();
    for &l in m.iter().filter(|&&l| l != 0) {
        if !resolved.contains_key(&l) {
            resolved.insert(l, reserved(l)?);
        }
    }
    let segment_ids: std::collections::HashSet<u32> = seg.iter().copied().filter(|&l| l != 0).collect();
    let mut seen = std::collections::HashSet::new();
    for &id in resolved.values() {
        if id == 0 || segment_ids.contains(&id) || !seen.insert(id) {
            return Err(Error::IdCollision(id));
        }
    }
    let out: Vec<u32> = seg.iter().zip(m).map(|(&s, &k)| if k != 0 { resolved[&k] } else { s }).collect();
    VoxelGrid::from_labels(labels.dims(), labels.voxel_size(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: Vec<u32>) -> VoxelGrid {
        VoxelGrid::from_labels([v.len(), 1, 1], [1.0; 3], v).unwrap()
    }

    #[test]
    fn empty_mask_is_identity() {
        let seg = grid(vec![0, 1, 2, 2, 0]);
        assert_eq!(apply_mask(&seg, &grid(vec![0; 5]), &MaskIds::AboveSegments).unwrap(), seg);
    }

    #[test]
    fn reserved_ids_and_counts() {
        let seg = grid(vec![0, 1, 1, 2, 0, 0, 3]);
        let mask = grid(vec![1, 1, 0, 0, 0, 2, 2]);
        let out = apply_mask(&seg, &mask, &MaskIds::AboveSegments).unwrap();
        assert_eq!(out.labels().unwrap(), &[4, 4, 1, 2, 0, 5, 5]);
        let nz = |g: &VoxelGrid| g.labels().unwrap().iter().filter(|&&l| l != 0).count();
        let overlap = seg.labels().unwrap().iter().zip(mask.labels().unwrap()).filter(|(a, b)| **a != 0 && **b != 0).count();
        assert_eq!(nz(&out), nz(&mask) + nz(&seg) - overlap);
    }

    #[test]
    fn explicit_collision_is_an_error() {
        let seg = grid(vec![0, 7]);
        let mask = grid(vec![1, 0]);
        let map = MaskIds::Explicit(BTreeMap::from([(1, 7)]));
        assert!(matches!(apply_mask(&seg, &mask, &map), Err(Error::IdCollision(7))));
        let ok = MaskIds::Explicit(BTreeMap::from([(1, 100)]));
        assert_eq!(apply_mask(&seg, &mask, &ok).unwrap().labels().unwrap(), &[100, 7]);
    }
}
