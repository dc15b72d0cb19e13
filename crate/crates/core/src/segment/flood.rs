use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::labels::{neighbors6, LabelVolume, Provenance};
use super::seeds::{Seed, SeedList};
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Where flood fills start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum SeedPolicy {
    Explicit { seeds: SeedList },
    /// Lattice points `(i*s, j*s, k*s)` in x-fastest order.
    Grid { spacing: usize },
}

/// Seeded flood fill over 6-connected voxels with intensity `>= t_low`
/// that are not masked (mask value nonzero). Seeds are taken in order; a
/// seed on an ineligible or already labeled voxel is skipped and labeled
/// voxels are never relabeled. Explicit seeds keep their resolved label,
/// grid seeds are numbered 1, 2, ... as they start a fill.
pub fn flood_fill_segment(
    gray: &VoxelGrid,
    mask: Option<&VoxelGrid>,
    policy: &SeedPolicy,
    t_low: u8,
) -> Result<LabelVolume> {
    let dims = gray.dims();
    let g = gray.gray()?;
    let m = match mask {
        Some(mg) => {
            if mg.dims() != dims {
                return Err(Error::InvalidArgument(format!("mask dims {:?} differ from volume {:?}", mg.dims(), dims)));
            }
            Some(mg)
        }
        None => None,
    };
    let masked = |i: usize| match m {
        Some(mg) => {
            let [x, y, z] = mg.coords(i);
            mg.value(x, y, z) != 0
        }
        None => false,
    };
    let eligible = |i: usize| g[i] >= t_low && !masked(i);
    let mut labels = vec![0u32; g.len()];
    let mut queue = VecDeque::new();
    let mut fill = |start: usize, id: u32, labels: &mut Vec<u32>| {
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for n in neighbors6(dims, i) {
                if labels[n] == 0 && eligible(n) {
                    labels[n] = id;
                    queue.push_back(n);
                }
            }
        }
    };
    match policy {
        SeedPolicy::Explicit { seeds } => {
            seeds.validate(dims)?;
            for (s, id) in seeds.seeds.iter().zip(seeds.resolved_labels()) {
                let i = gray.index(s.x, s.y, s.z);
                if labels[i] == 0 && eligible(i) {
                    fill(i, id, &mut labels);
                }
            }
        }
        SeedPolicy::Grid { spacing } => {
            if *spacing == 0 {
                return Err(Error::InvalidArgument("grid seed spacing must be positive".into()));
            }
            let mut next = 1u32;
            for z in (0..dims[2]).step_by(*spacing) {
                for y in (0..dims[1]).step_by(*spacing) {
                    for x in (0..dims[0]).step_by(*spacing) {
                        let i = gray.index(x, y, z);
                        if labels[i] == 0 && eligible(i) {
                            fill(i, next, &mut labels);
                            next += 1;
                        }
                    }
                }
            }
        }
    }
    LabelVolume::new(VoxelGrid::from_labels(dims, gray.voxel_size(), labels)?, Provenance::Global)
}

/// Grid policy seeds that would start a fill, for inspection.
pub fn grid_seeds(dims: [usize; 3], spacing: usize) -> SeedList {
    let mut seeds = Vec::new();
    for z in (0..dims[2]).step_by(spacing.max(1)) {
        for y in (0..dims[1]).step_by(spacing.max(1)) {
            for x in (0..dims[0]).step_by(spacing.max(1)) {
                seeds.push(Seed::at(x, y, z));
            }
        }
    }
    SeedList::new(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::canonical_relabel;
    use crate::synth::{blob_volume, random_blobs};
    use proptest::prelude::*;

    /// Independent oracle: union-find connected components of the eligible set.
    fn components(gray: &[u8], mask: Option<&[u32]>, dims: [usize; 3], t: u8) -> Vec<u32> {
        let n = gray.len();
        let ok = |i: usize| gray[i] >= t && mask.map_or(true, |m| m[i] == 0);
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let idx = |x: usize, y: usize, z: usize| (z * dims[1] + y) * dims[0] + x;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = idx(x, y, z);
                    if !ok(i) {
                        continue;
                    }
                    for (nx, ny, nz) in [(x + 1, y, z), (x, y + 1, z), (x, y, z + 1)] {
                        if nx < dims[0] && ny < dims[1] && nz < dims[2] && ok(idx(nx, ny, nz)) {
                            let (a, b) = (find(&mut parent, i), find(&mut parent, idx(nx, ny, nz)));
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
        let raw: Vec<u32> = (0..n).map(|i| if ok(i) { find(&mut parent, i) as u32 + 1 } else { 0 }).collect();
        canonical_relabel(&raw)
    }

    #[test]
    fn uniform_volume_is_one_object() {
        let g = VoxelGrid::from_gray([5, 5, 5], [1.0; 3], vec![80; 125]).unwrap();
        let seeds = SeedList::new(vec![Seed::at(2, 2, 2)]);
        let out = flood_fill_segment(&g, None, &SeedPolicy::Explicit { seeds }, 80).unwrap();
        assert!(out.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn two_blobs_two_labels() {
        let dims = [40, 30, 30];
        let blobs = vec![
            crate::synth::Blob { center: [10, 15, 15], radii: [6.0, 6.0, 6.0] },
            crate::synth::Blob { center: [29, 15, 15], radii: [6.0, 6.0, 6.0] },
        ];
        let g = blob_volume(dims, &blobs, 200, 30, 10, 1);
        let out = flood_fill_segment(&g, None, &SeedPolicy::Grid { spacing: 4 }, 120).unwrap();
        assert_eq!(out.label_set(), vec![1, 2]);
        assert_eq!(canonical_relabel(out.labels()), components(g.gray().unwrap(), None, dims, 120));
    }

    #[test]
    fn masked_voxels_stay_unlabeled() {
        let dims = [8, 8, 8];
        let g = VoxelGrid::from_gray(dims, [1.0; 3], vec![200; 512]).unwrap();
        let mask: Vec<u32> = (0..512).map(|i| u32::from(i % 8 < 3)).collect();
        let mg = VoxelGrid::from_labels(dims, [1.0; 3], mask.clone()).unwrap();
        let out = flood_fill_segment(&g, Some(&mg), &SeedPolicy::Grid { spacing: 2 }, 100).unwrap();
        for (l, m) in out.labels().iter().zip(&mask) {
            assert!(*m == 0 || *l == 0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn unit_grid_equals_components(seed in 0u64..500, count in 1usize..8) {
            let dims = [24, 20, 16];
            let blobs = random_blobs(dims, count, (2.0, 6.0), 1, seed);
            let g = blob_volume(dims, &blobs, 180, 40, 20, seed);
            let mask_data: Vec<u32> = (0..g.len()).map(|i| u32::from(i % 97 == 0)).collect();
            let mask = VoxelGrid::from_labels(dims, [1.0; 3], mask_data.clone()).unwrap();
            let out = flood_fill_segment(&g, Some(&mask), &SeedPolicy::Grid { spacing: 1 }, 110).unwrap();
            prop_assert_eq!(canonical_relabel(out.labels()), components(g.gray().unwrap(), Some(&mask_data), dims, 110));
        }
    }
}
