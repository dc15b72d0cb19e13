use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::edt::distance_to_boundary;
use crate::error::{Error, Result};
use crate::volume::{VoxelGrid, VoxelSize};

/// Point graph: nodes are `[x, y, z, radius]` in nanometers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub object_id: u32,
    pub nodes: Vec<[f64; 4]>,
    pub edges: Vec<[u32; 2]>,
}

impl Skeleton {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e[0] as usize] += 1;
            d[e[1] as usize] += 1;
        }
        d
    }

    /// True when the edges contain no cycle.
    pub fn is_forest(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e[0] as usize), find(&mut parent, e[1] as usize));
            if a == b {
                return false;
            }
            parent[a] = b;
        }
        true
    }

    pub fn cable_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let (a, b) = (self.nodes[e[0] as usize], self.nodes[e[1] as usize]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum()
    }

    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.nodes.first()?;
        let mut lo = [first[0], first[1], first[2]];
        let mut hi = lo;
        for n in &self.nodes {
            for a in 0..3 {
                lo[a] = lo[a].min(n[a]);
                hi[a] = hi[a].max(n[a]);
            }
        }
        Some((lo, hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeasarParams {
    pub scale: f64,
    pub exponent: f64,
    pub invalidation_radius_factor: f64,
    /// Nanometers.
    pub min_path_length: f64,
}

impl Default for TeasarParams {
    fn default() -> Self {
        Self { scale: 5000.0, exponent: 16.0, invalidation_radius_factor: 2.0, min_path_length: 10.0 }
    }
}

impl TeasarParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.scale, self.exponent, self.invalidation_radius_factor, self.min_path_length]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("teasar parameters must be positive: {self:?}")))
        }
    }
}

const EPS: f64 = 1e-9;
const NONE: u32 = u32::MAX;

#[derive(PartialEq)]
struct Entry(f64, u32);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Object voxels of one label inside its bounding box, with 26-neighbor
/// adjacency in compact indices.
struct Region {
    lo: [usize; 3],
    dims: [usize; 3],
    voxels: Vec<[usize; 3]>,
    dbf: Vec<f64>,
    compact: Vec<u32>,
    neighbors: Vec<Vec<(u32, f64)>>,
}

impl Region {
    fn build(labels: &VoxelGrid, object_id: u32, voxel_size: VoxelSize) -> Result<Region> {
        let data = labels.labels()?;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (i, &l) in data.iter().enumerate() {
            if l == object_id {
                let p = labels.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        if lo[0] == usize::MAX {
            return Err(Error::MissingObject(object_id));
        }
        let dims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
        let local = |p: [usize; 3]| (p[2] * dims[1] + p[1]) * dims[0] + p[0];
        let mut mask = vec![false; dims.iter().product()];
        let mut compact = vec![NONE; mask.len()];
        let mut voxels = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if data[labels.index(lo[0] + x, lo[1] + y, lo[2] + z)] == object_id {
                        let i = local([x, y, z]);
                        mask[i] = true;
                        compact[i] = voxels.len() as u32;
                        voxels.push([x, y, z]);
                    }
                }
            }
        }
        let field = distance_to_boundary(&mask, dims, voxel_size);
        let dbf = voxels.iter().map(|&p| field[local(p)]).collect();
        let mut offsets = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) != (0, 0, 0) {
                        let len = ((dx as f64 * voxel_size[0]).powi(2)
                            + (dy as f64 * voxel_size[1]).powi(2)
                            + (dz as f64 * voxel_size[2]).powi(2))
                        .sqrt();
                        offsets.push(([dx, dy, dz], len));
                    }
                }
            }
        }
        let neighbors = voxels
            .iter()
            .map(|p| {
                offsets
                    .iter()
                    .filter_map(|(d, len)| {
                        let q: [i64; 3] = std::array::from_fn(|a| p[a] as i64 + d[a]);
                        if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                            return None;
                        }
                        let c = compact[local(q.map(|v| v as usize))];
                        (c != NONE).then_some((c, *len))
                    })
                    .collect()
            })
            .collect();
        Ok(Region { lo, dims, voxels, dbf, compact, neighbors })
    }

    /// Dijkstra from `source`; `weight(v)` multiplies the step length into `v`.
    fn dijkstra(&self, source: u32, weight: impl Fn(u32) -> f64) -> (Vec<f64>, Vec<u32>) {
        let n = self.voxels.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![NONE; n];
        let mut heap = BinaryHeap::new();
        dist[source as usize] = 0.0;
        heap.push(Entry(0.0, source));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u as usize] {
                continue;
            }
            for &(v, len) in &self.neighbors[u as usize] {
                let nd = d + len * weight(v);
                if nd < dist[v as usize] {
                    dist[v as usize] = nd;
                    parent[v as usize] = u;
                    heap.push(Entry(nd, v));
                }
            }
        }
        (dist, parent)
    }

    fn physical(&self, i: u32, voxel_size: VoxelSize) -> [f64; 3] {
        let p = self.voxels[i as usize];
        std::array::from_fn(|a| (self.lo[a] + p[a]) as f64 * voxel_size[a])
    }
}

fn argmax(values: &[f64], keep: impl Fn(usize) -> bool) -> Option<u32> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in values.iter().enumerate() {
        if keep(i) && v.is_finite() && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    best.map(|(_, i)| i as u32)
}

/// TEASAR skeleton of one label. Node radii are the boundary distance.
/// Leaf tips are walked inward while the boundary distance keeps growing,
/// so endpoints sit on the medial axis instead of the object surface.
pub fn teasar_skeletonize(
    labels: &VoxelGrid,
    object_id: u32,
    params: &TeasarParams,
    voxel_size: VoxelSize,
) -> Result<Skeleton> {
    params.validate()?;
    let region = Region::build(labels, object_id, voxel_size)?;
    let n = region.voxels.len();
    let max_dbf = region.dbf.iter().cloned().fold(0.0, f64::max);

    let (from_start, _) = region.dijkstra(0, |_| 1.0);
    let root = argmax(&from_start, |_| true).unwrap_or(0);
    let (daf, _) = region.dijkstra(root, |_| 1.0);
    let (_, tree) = region.dijkstra(root, |v| {
        let r = 1.0 - region.dbf[v as usize] / max_dbf;
        params.scale * r.max(0.0).powf(params.exponent) + EPS
    });

    let mut visited = vec![false; n];
    let mut node_of = vec![NONE; n];
    let mut order: Vec<u32> = vec![root];
    let mut edges: Vec<[u32; 2]> = Vec::new();
    node_of[root as usize] = 0;
    invalidate(&region, &[root], params.invalidation_radius_factor, voxel_size, &mut visited);

    while let Some(target) = argmax(&daf, |i| !visited[i]) {
        let mut path = vec![target];
        let mut cur = target;
        while node_of[cur as usize] == NONE {
            cur = tree[cur as usize];
            if cur == NONE {
                break;
            }
            path.push(cur);
        }
        invalidate(&region, &path, params.invalidation_radius_factor, voxel_size, &mut visited);
        let Some(&junction) = path.last() else { continue };
        if cur == NONE {
            continue;
        }
        let length: f64 = path
            .windows(2)
            .map(|w| dist(region.physical(w[0], voxel_size), region.physical(w[1], voxel_size)))
            .sum();
        if length < params.min_path_length {
            continue;
        }
        let mut prev = node_of[junction as usize];
        for &v in path.iter().rev().skip(1) {
            node_of[v as usize] = order.len() as u32;
            order.push(v);
            edges.push([prev, node_of[v as usize]]);
            prev = node_of[v as usize];
        }
    }

    let (order, edges) = trim_tips(&region, order, edges);
    let nodes = order
        .iter()
        .map(|&v| {
            let p = region.physical(v, voxel_size);
            [p[0], p[1], p[2], region.dbf[v as usize]]
        })
        .collect();
    Ok(Skeleton { object_id, nodes, edges })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mark every voxel within `factor * dbf(p)` of a path voxel `p`.
fn invalidate(region: &Region, path: &[u32], factor: f64, voxel_size: VoxelSize, visited: &mut [bool]) {
    let local = |p: [usize; 3]| (p[2] * region.dims[1] + p[1]) * region.dims[0] + p[0];
    for &v in path {
        visited[v as usize] = true;
        let c = region.voxels[v as usize];
        let r = factor * region.dbf[v as usize];
        let reach: [usize; 3] = std::array::from_fn(|a| (r / voxel_size[a]).floor() as usize);
        let lo: [usize; 3] = std::array::from_fn(|a| c[a].saturating_sub(reach[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| (c[a] + reach[a]).min(region.dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let q = region.compact[local([x, y, z])];
                    if q == NONE || visited[q as usize] {
                        continue;
                    }
                    let q_pos = [x, y, z];
                    let d = (0..3)
                        .map(|a| ((q_pos[a] as f64 - c[a] as f64) * voxel_size[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if d <= r {
                        visited[q as usize] = true;
                    }
                }
            }
        }
    }
}

/// Remove leaf nodes whose single neighbor has a strictly larger radius.
fn trim_tips(region: &Region, order: Vec<u32>, edges: Vec<[u32; 2]>) -> (Vec<u32>, Vec<[u32; 2]>) {
    let m = order.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    for e in &edges {
        adj[e[0] as usize].push(e[1] as usize);
        adj[e[1] as usize].push(e[0] as usize);
    }
    let mut alive = vec![true; m];
    let mut remaining = m;
    let mut stack: Vec<usize> = (0..m).filter(|&i| adj[i].len() == 1).collect();
    while let Some(leaf) = stack.pop() {
        if !alive[leaf] || remaining <= 1 {
            continue;
        }
        let live: Vec<usize> = adj[leaf].iter().copied().filter(|&j| alive[j]).collect();
        if live.len() != 1 {
            continue;
        }
        let next = live[0];
        if region.dbf[order[next] as usize] <= region.dbf[order[leaf] as usize] {
            continue;
        }
        alive[leaf] = false;
        remaining -= 1;
        if adj[next].iter().filter(|&&j| alive[j]).count() == 1 {
            stack.push(next);
        }
    }
    let mut remap = vec![NONE; m];
    let mut kept = Vec::new();
    for i in 0..m {
        if alive[i] {
            remap[i] = kept.len() as u32;
            kept.push(order[i]);
        }
    }
    let edges = edges
        .into_iter()
        .filter(|e| alive[e[0] as usize] && alive[e[1] as usize])
        .map(|e| [remap[e[0] as usize], remap[e[1] as usize]])
        .collect();
    (kept, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> VoxelGrid {
        let mut v = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    v.push(f(x, y, z) as u32);
                }
            }
        }
        VoxelGrid::from_labels(dims, [1.0; 3], v).unwrap()
    }

    fn cylinder() -> VoxelGrid {
        // axis along x at (y, z) = (8, 8), x in 5..55
        volume([60, 17, 17], |x, y, z| {
            let (dy, dz) = (y as f64 - 8.0, z as f64 - 8.0);
            (5..55).contains(&x) && dy * dy + dz * dz <= 9.0
        })
    }

    #[test]
    fn single_voxel_gives_one_node() {
        let v = volume([3, 3, 3], |x, y, z| (x, y, z) == (1, 1, 1));
        let s = teasar_skeletonize(&v, 1, &TeasarParams::default(), [1.0; 3]).unwrap();
        assert_eq!(s.nodes.len(), 1);
        assert!(s.edges.is_empty());
        assert_eq!(s.nodes[0], [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_object_errors() {
        let v = volume([3, 3, 3], |_, _, _| false);
        assert!(matches!(
            teasar_skeletonize(&v, 1, &TeasarParams::default(), [1.0; 3]),
            Err(Error::MissingObject(1))
        ));
    }

    #[test]
    fn rejects_nonpositive_params() {
        let v = volume([3, 3, 3], |_, _, _| true);
        let p = TeasarParams { exponent: 0.0, ..TeasarParams::default() };
        assert!(teasar_skeletonize(&v, 1, &p, [1.0; 3]).is_err());
    }

    #[test]
    fn cylinder_follows_axis() {
        let s = teasar_skeletonize(&cylinder(), 1, &TeasarParams::default(), [1.0; 3]).unwrap();
        assert!(s.is_forest());
        let dev = s
            .nodes
            .iter()
            .map(|n| ((n[1] - 8.0).powi(2) + (n[2] - 8.0).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(dev <= 1.5, "deviation {dev}");
        let deg = s.degrees();
        let ends: Vec<[f64; 3]> =
            (0..s.nodes.len()).filter(|&i| deg[i] == 1).map(|i| [s.nodes[i][0], s.nodes[i][1], s.nodes[i][2]]).collect();
        assert_eq!(ends.len(), 2, "{ends:?}");
        for c in [[5.0, 8.0, 8.0], [54.0, 8.0, 8.0]] {
            let near = ends.iter().map(|e| dist(*e, c)).fold(f64::INFINITY, f64::min);
            assert!(near <= 3.0, "end center {c:?} nearest endpoint {near}");
        }
    }

    #[test]
    fn l_shape_has_no_branch_and_turns_at_corner() {
        // arm A along x at (y, z) = (6, 6) for x in 2..40, arm B along y at x = 37
        let v = volume([44, 44, 13], |x, y, z| {
            let dz = z as f64 - 6.0;
            let in_a = (2..41).contains(&x) && (y as f64 - 6.0).powi(2) + dz * dz <= 9.0;
            let in_b = (3..41).contains(&y) && (x as f64 - 37.0).powi(2) + dz * dz <= 9.0;
            in_a || in_b
        });
        let s = teasar_skeletonize(&v, 1, &TeasarParams::default(), [1.0; 3]).unwrap();
        assert!(s.is_forest());
        let deg = s.degrees();
        assert!(deg.iter().all(|&d| d <= 2), "branch node present: {deg:?}");
        assert_eq!(s.edges.len(), s.nodes.len() - 1);
        // the node with the sharpest turn sits at the corner
        let mut adj = vec![Vec::new(); s.nodes.len()];
        for e in &s.edges {
            adj[e[0] as usize].push(e[1] as usize);
            adj[e[1] as usize].push(e[0] as usize);
        }
        let corner = [37.0, 6.0, 6.0];
        let p = |i: usize| [s.nodes[i][0], s.nodes[i][1], s.nodes[i][2]];
        // turning measured over a 4-node window to smooth voxel steps
        let walk = |from: usize, mut prev: usize, steps: usize| {
            let mut cur = from;
            for _ in 0..steps {
                match adj[cur].iter().find(|&&j| j != prev) {
                    Some(&n) => {
                        prev = cur;
                        cur = n;
                    }
                    None => break,
                }
            }
            cur
        };
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..s.nodes.len() {
            if adj[i].len() != 2 {
                continue;
            }
            let a = walk(adj[i][0], i, 3);
            let b = walk(adj[i][1], i, 3);
            let (u, w) = (p(a), p(b));
            let c = p(i);
            let d1: Vec<f64> = (0..3).map(|k| u[k] - c[k]).collect();
            let d2: Vec<f64> = (0..3).map(|k| w[k] - c[k]).collect();
            let cos = (0..3).map(|k| d1[k] * d2[k]).sum::<f64>()
                / (dist(u, c) * dist(w, c)).max(1e-12);
            // straight lines give cos = -1; sharper turns give larger cos
            if cos > best.0 {
                best = (cos, i);
            }
        }
        assert!(dist(p(best.1), corner) <= 3.0, "turn at {:?}", p(best.1));
    }

    #[test]
    fn covers_every_voxel_and_is_a_tree() {
        let v = cylinder();
        let params = TeasarParams::default();
        let s = teasar_skeletonize(&v, 1, &params, [1.0; 3]).unwrap();
        assert_eq!(s.edges.len(), s.nodes.len() - 1);
        let max_r = s.nodes.iter().map(|n| n[3]).fold(0.0, f64::max);
        let data = v.labels().unwrap();
        for (i, &l) in data.iter().enumerate() {
            if l == 1 {
                let c = v.coords(i).map(|c| c as f64);
                let near = s.nodes.iter().map(|n| dist([n[0], n[1], n[2]], c)).fold(f64::INFINITY, f64::min);
                assert!(near <= params.invalidation_radius_factor * max_r + 1e-9);
            }
        }
        assert!(s.nodes.iter().all(|n| n[3] >= 0.0));
    }

    #[test]
    fn anisotropic_voxels_scale_nodes() {
        let v = volume([20, 7, 7], |x, y, z| (2..18).contains(&x) && (1..6).contains(&y) && (1..6).contains(&z));
        let s = teasar_skeletonize(&v, 1, &TeasarParams::default(), [4.0, 4.0, 40.0]).unwrap();
        for n in &s.nodes {
            assert_eq!(n[0] % 4.0, 0.0);
            assert_eq!(n[2] % 40.0, 0.0);
        }
        assert!(s.is_forest());
    }
}
