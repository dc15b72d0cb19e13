use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::labels::{neighbors6, LabelVolume, Provenance};
use super::prob::ProbabilityMap;
use super::seeds::SeedList;
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Seeded priority flood over 6-connected voxels at or above `floor`
/// (stored 0..=255 scale). Higher probabilities are expanded first; equal
/// ones in insertion order. Every voxel is labeled when first reached, so
/// each reachable voxel receives exactly one label.
pub fn watershed3d(prob: &ProbabilityMap, seeds: &SeedList, floor: u8) -> Result<LabelVolume> {
    let dims = prob.grid.dims();
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("watershed needs at least one seed".into()));
    }
    seeds.validate(dims)?;
    let p = prob.grid.gray()?;
    for (index, s) in seeds.seeds.iter().enumerate() {
        let v = p[prob.grid.index(s.x, s.y, s.z)];
        if v < floor {
            return Err(Error::InvalidSeed {
                index,
                x: s.x as u64,
                y: s.y as u64,
                z: s.z as u64,
                reason: format!("probability {v} below floor {floor}"),
            });
        }
    }
    let ids = seeds.resolved_labels();
    let mut labels = vec![0u32; p.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (s, &id) in seeds.seeds.iter().zip(&ids) {
        let i = prob.grid.index(s.x, s.y, s.z);
        if labels[i] != 0 {
            continue;
        }
        labels[i] = id;
        heap.push((p[i], Reverse(seq), i));
        seq += 1;
    }
    while let Some((_, _, i)) = heap.pop() {
        let id = labels[i];
        for n in neighbors6(dims, i) {
            if labels[n] == 0 && p[n] >= floor {
                labels[n] = id;
                heap.push((p[n], Reverse(seq), n));
                seq += 1;
            }
        }
    }
    LabelVolume::new(VoxelGrid::from_labels(dims, prob.grid.voxel_size(), labels)?, Provenance::Global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{ProbabilitySource, Seed};

    fn map(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u8) -> ProbabilityMap {
        let mut v = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    v.push(f(x, y, z));
                }
            }
        }
        ProbabilityMap::new(VoxelGrid::from_gray(dims, [1.0; 3], v).unwrap(), ProbabilitySource::Synthetic).unwrap()
    }

    #[test]
    fn single_seed_covers_connected_region() {
        let m = map([6, 5, 4], |x, _, _| if x == 5 { 10 } else { 200 });
        let out = watershed3d(&m, &SeedList::new(vec![Seed::at(0, 0, 0)]), 100).unwrap();
        for (i, &l) in out.labels().iter().enumerate() {
            let x = i % 6;
            assert_eq!(l, if x == 5 { 0 } else { 1 });
        }
    }

    #[test]
    fn separated_bumps_never_touch() {
        let bump = |x: usize, c: f64| 250.0 * (-((x as f64 - c).powi(2)) / 18.0).exp();
        let m = map([40, 6, 6], |x, _, _| (bump(x, 10.0) + bump(x, 30.0)).round() as u8);
        let seeds = SeedList::new(vec![Seed::at(10, 3, 3), Seed::at(30, 3, 3)]);
        let out = watershed3d(&m, &seeds, 50).unwrap();
        let cols = |l: u32| (0..40).filter(|&x| out.labels()[x + 40 * (3 + 6 * 3)] == l).collect::<Vec<_>>();
        let (a, b) = (cols(1), cols(2));
        assert!(!a.is_empty() && !b.is_empty());
        assert!(a.last().unwrap() + 1 < *b.first().unwrap());
    }

    #[test]
    fn errors() {
        let m = map([4, 4, 4], |_, _, _| 100);
        assert!(watershed3d(&m, &SeedList::default(), 50).is_err());
        let err = watershed3d(&m, &SeedList::new(vec![Seed::at(1, 1, 1), Seed::at(2, 2, 2)]), 150).unwrap_err();
        assert!(matches!(err, Error::InvalidSeed { index: 0, .. }));
    }
}
