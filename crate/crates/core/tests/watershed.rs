use std::collections::VecDeque;

use emflow_core::segment::{watershed3d, ProbabilityMap, ProbabilitySource, Seed, SeedList};
use emflow_core::volume::VoxelGrid;

const DIMS: [usize; 3] = [41, 17, 17];
const FLOOR: u8 = 30;

fn idx(x: usize, y: usize, z: usize) -> usize {
    (z * DIMS[1] + y) * DIMS[0] + x
}

fn nbrs(i: usize) -> Vec<usize> {
    let (x, y, z) = (i % DIMS[0], (i / DIMS[0]) % DIMS[1], i / (DIMS[0] * DIMS[1]));
    let mut out = Vec::new();
    if x > 0 { out.push(idx(x - 1, y, z)); }
    if x + 1 < DIMS[0] { out.push(idx(x + 1, y, z)); }
    if y > 0 { out.push(idx(x, y - 1, z)); }
    if y + 1 < DIMS[1] { out.push(idx(x, y + 1, z)); }
    if z > 0 { out.push(idx(x, y, z - 1)); }
    if z + 1 < DIMS[2] { out.push(idx(x, y, z + 1)); }
    out
}

/// Two equal Gaussian bumps mirrored across the plane x = 20.
fn double_bump() -> Vec<u8> {
    let mut v = Vec::new();
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let g = |cx: f64| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - 8.0).powi(2) + (z as f64 - 8.0).powi(2);
                    (-d2 / 72.0).exp()
                };
                v.push((40.0 + 200.0 * (g(12.0) + g(28.0))).round().min(255.0) as u8);
            }
        }
    }
    v
}

/// Slow reference: repeatedly label the highest unlabeled frontier voxel
/// with the label of its highest labeled neighbor.
fn oracle(p: &[u8], seeds: &[(usize, u32)]) -> Vec<u32> {
    let mut labels = vec![0u32; p.len()];
    for &(i, l) in seeds {
        labels[i] = l;
    }
    loop {
        let mut best: Option<(u8, usize)> = None;
        for i in 0..p.len() {
            if labels[i] != 0 || p[i] < FLOOR || !nbrs(i).iter().any(|&n| labels[n] != 0) {
                continue;
            }
            if best.is_none_or(|(b, _)| p[i] > b) {
                best = Some((p[i], i));
            }
        }
        let Some((_, i)) = best else { break };
        let from = nbrs(i).into_iter().filter(|&n| labels[n] != 0).max_by_key(|&n| (p[n], std::cmp::Reverse(labels[n])));
        labels[i] = labels[from.unwrap()];
    }
    labels
}

#[test]
fn symmetric_double_bump_splits_at_ridge() {
    let p = double_bump();
    let grid = VoxelGrid::from_gray(DIMS, [1.0; 3], p.clone()).unwrap();
    let map = ProbabilityMap::new(grid, ProbabilitySource::Synthetic).unwrap();
    let seeds = SeedList::new(vec![Seed::at(12, 8, 8), Seed::at(28, 8, 8)]);
    let out = watershed3d(&map, &seeds, FLOOR).unwrap();
    let labels = out.labels();

    for (i, &l) in labels.iter().enumerate() {
        let x = i % DIMS[0];
        match l {
            1 => assert!(x <= 21, "label 1 at x={x}"),
            2 => assert!(x >= 19, "label 2 at x={x}"),
            _ => {}
        }
    }

    // conservation: labeled set equals the above-floor set reachable from a seed
    let mut reach = vec![false; p.len()];
    let mut q: VecDeque<usize> = [idx(12, 8, 8), idx(28, 8, 8)].into_iter().collect();
    for &s in &q {
        reach[s] = true;
    }
    while let Some(i) = q.pop_front() {
        for n in nbrs(i) {
            if !reach[n] && p[n] >= FLOOR {
                reach[n] = true;
                q.push_back(n);
            }
        }
    }
    for i in 0..p.len() {
        assert_eq!(labels[i] != 0, reach[i], "voxel {i}");
        assert!(labels[i] <= 2);
    }

    let reference = oracle(&p, &[(idx(12, 8, 8), 1), (idx(28, 8, 8), 2)]);
    for i in 0..p.len() {
        let x = i % DIMS[0];
        if (x as i64 - 20).abs() > 1 {
            assert_eq!(labels[i], reference[i], "disagree off-ridge at x={x}");
        }
    }
}
