use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::SubvolumeSpec;
use super::labels::{LabelVolume, Provenance};
use crate::error::{Error, IoContext, Result};
use crate::volume::{VoxelGrid, VoxelSize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconcileParams {
    pub merge_frac: f64,
    pub merge_min_voxels: u64,
}

impl Default for ReconcileParams {
    fn default() -> Self {
        Self {
            merge_frac: 0.5,
            merge_min_voxels: 10,
        }
    }
}

/// `(subvolume index, local label)`.
pub type LabelNode = ([usize; 3], u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEdge {
    pub a: LabelNode,
    pub b: LabelNode,
    pub agreement: u64,
    /// `"i-j-k/i-j-k"` of the two cubes sharing the overlap.
    pub overlap: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeGraph {
    pub nodes: Vec<LabelNode>,
    /// Retained edges only.
    pub edges: Vec<MergeEdge>,
    /// Global id of every node, same order as `nodes`.
    pub global_ids: Vec<u32>,
}

impl MergeGraph {
    pub fn global_id(&self, node: LabelNode) -> Option<u32> {
        self.nodes.binary_search(&node).ok().map(|i| self.global_ids[i])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).at(path)?;
        crate::volume::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&std::fs::read_to_string(path).at(path)?).at(path)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Keeps the smaller index as root so roots are the smallest node.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn check_grid(parts: &[(SubvolumeSpec, LabelVolume)]) -> Result<[usize; 3]> {
    let mut seen = BTreeSet::new();
    let mut axis: [BTreeMap<usize, (usize, usize)>; 3] = Default::default();
    for (spec, lv) in parts {
        if lv.grid.dims() != spec.dims {
            return Err(Error::InconsistentGrid(format!(
                "cube {} has labels of dims {:?}, expected {:?}",
                spec.name(),
                lv.grid.dims(),
                spec.dims
            )));
        }
        if !seen.insert(spec.index) {
            return Err(Error::InconsistentGrid(format!("duplicate cube {}", spec.name())));
        }
        for a in 0..3 {
            let span = (spec.offset[a], spec.dims[a]);
            if *axis[a].entry(spec.index[a]).or_insert(span) != span {
                return Err(Error::InconsistentGrid(format!(
                    "cube {} disagrees with its grid line on axis {a}",
                    spec.name()
                )));
            }
        }
    }
    let counts: [usize; 3] = std::array::from_fn(|a| axis[a].len());
    if seen.len() != counts.iter().product::<usize>() {
        return Err(Error::InconsistentGrid("cubes do not form a full grid".into()));
    }
    let mut extent = [0usize; 3];
    for a in 0..3 {
        let spans: Vec<(usize, (usize, usize))> = axis[a].iter().map(|(&k, &v)| (k, v)).collect();
        if spans.iter().enumerate().any(|(i, (k, _))| *k != i) {
            return Err(Error::InconsistentGrid(format!("indices on axis {a} are not contiguous")));
        }
        if spans[0].1 .0 != 0 {
            return Err(Error::InconsistentGrid(format!("axis {a} does not start at 0")));
        }
        for w in spans.windows(2) {
            let (prev, next) = (w[0].1, w[1].1);
            if next.0 <= prev.0 || next.0 > prev.0 + prev.1 {
                return Err(Error::InconsistentGrid(format!("gap or disorder on axis {a}")));
            }
        }
        let last = spans.last().unwrap().1;
        extent[a] = last.0 + last.1;
    }
    Ok(extent)
}

/// Merges per-cube label maps into one global map. Face-adjacent cubes vote
/// in their shared box: local labels `(la, lb)` are joined when they co-occur
/// on at least `merge_min_voxels` voxels and on at least `merge_frac` of the
/// smaller of their two overlap footprints. Global ids number the union-find
/// classes from 1 in ascending order of their smallest member; each voxel is
/// taken from the lowest-indexed cube containing it.
pub fn reconcile(parts: &[(SubvolumeSpec, LabelVolume)], params: &ReconcileParams) -> Result<(LabelVolume, MergeGraph)> {
    if parts.is_empty() {
        return Err(Error::InconsistentGrid("no subvolumes".into()));
    }
    let extent = check_grid(parts)?;
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by_key(|&i| parts[i].0.index);

    let mut nodes: Vec<LabelNode> = Vec::new();
    for &i in &order {
        let (spec, lv) = &parts[i];
        nodes.extend(lv.label_set().into_iter().map(|l| (spec.index, l)));
    }
    nodes.sort();
    let node_id = |n: LabelNode| nodes.binary_search(&n).expect("node registered");
    let mut uf = UnionFind { parent: (0..nodes.len()).collect() };
    let by_index: HashMap<[usize; 3], usize> = parts.iter().enumerate().map(|(i, p)| (p.0.index, i)).collect();

    let mut edges = Vec::new();
    for &i in &order {
        let (sa, la) = &parts[i];
        for a in 0..3 {
            let mut nb = sa.index;
            nb[a] += 1;
            let Some(&j) = by_index.get(&nb) else { continue };
            let (sb, lb) = &parts[j];
            let Some((off, dims)) = sa.intersection(sb) else { continue };
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            let mut count_a: HashMap<u32, u64> = HashMap::new();
            let mut count_b: HashMap<u32, u64> = HashMap::new();
            let (ga, gb) = (la.labels(), lb.labels());
            for z in off[2]..off[2] + dims[2] {
                for y in off[1]..off[1] + dims[1] {
                    for x in off[0]..off[0] + dims[0] {
                        let va = ga[la.grid.index(x - sa.offset[0], y - sa.offset[1], z - sa.offset[2])];
                        let vb = gb[lb.grid.index(x - sb.offset[0], y - sb.offset[1], z - sb.offset[2])];
                        if va != 0 {
                            *count_a.entry(va).or_default() += 1;
                        }
                        if vb != 0 {
                            *count_b.entry(vb).or_default() += 1;
                        }
                        if va != 0 && vb != 0 {
                            *pairs.entry((va, vb)).or_default() += 1;
                        }
                    }
                }
            }
            let mut keys: Vec<_> = pairs.into_iter().collect();
            keys.sort();
            for ((va, vb), agreement) in keys {
                let smaller = count_a[&va].min(count_b[&vb]) as f64;
                if agreement >= params.merge_min_voxels && agreement as f64 >= params.merge_frac * smaller {
                    let (na, nb) = ((sa.index, va), (sb.index, vb));
                    uf.union(node_id(na), node_id(nb));
                    edges.push(MergeEdge {
                        a: na,
                        b: nb,
                        agreement,
                        overlap: format!("{}/{}", sa.name(), sb.name()),
                    });
                }
            }
        }
    }

    let mut root_ids: BTreeMap<usize, u32> = BTreeMap::new();
    let roots: Vec<usize> = (0..nodes.len()).map(|i| uf.find(i)).collect();
    for &r in &roots {
        let next = root_ids.len() as u32 + 1;
        root_ids.entry(r).or_insert(next);
    }
    // BTreeMap iteration is ascending in root index, i.e. ascending node order
    for (n, (_, id)) in root_ids.iter_mut().enumerate() {
        *id = n as u32 + 1;
    }
    let global_ids: Vec<u32> = roots.iter().map(|r| root_ids[r]).collect();

    let voxel_size: VoxelSize = parts[0].1.grid.voxel_size();
    let mut out = vec![0u32; extent.iter().product()];
    for &i in order.iter().rev() {
        let (spec, lv) = &parts[i];
        let local: HashMap<u32, u32> = lv
            .label_set()
            .into_iter()
            .map(|l| (l, global_ids[node_id((spec.index, l))]))
            .collect();
        let src = lv.labels();
        for z in 0..spec.dims[2] {
            for y in 0..spec.dims[1] {
                let row = lv.grid.index(0, y, z);
                let dst = ((spec.offset[2] + z) * extent[1] + spec.offset[1] + y) * extent[0] + spec.offset[0];
                for x in 0..spec.dims[0] {
                    let v = src[row + x];
                    out[dst + x] = if v == 0 { 0 } else { local[&v] };
                }
            }
        }
    }
    let global = LabelVolume::new(VoxelGrid::from_labels(extent, voxel_size, out)?, Provenance::Global)?;
    Ok((global, MergeGraph { nodes, edges, global_ids }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{canonical_relabel, flood_fill_segment, generate_grid, SeedPolicy};

    fn split(labels: &VoxelGrid, grid: &[SubvolumeSpec]) -> Vec<(SubvolumeSpec, LabelVolume)> {
        grid.iter()
            .map(|s| {
                let g = labels.crop(s.offset, s.dims).unwrap();
                (*s, LabelVolume::new(g, Provenance::Subvolume(s.index)).unwrap())
            })
            .collect()
    }

    fn bar_volume() -> VoxelGrid {
        // bright bar along x crossing the cube boundary
        let dims = [40, 12, 12];
        let mut v = vec![10u8; 40 * 12 * 12];
        for z in 4..8 {
            for y in 4..8 {
                for x in 2..38 {
                    v[(z * 12 + y) * 40 + x] = 200;
                }
            }
        }
        VoxelGrid::from_gray(dims, [1.0; 3], v).unwrap()
    }

    #[test]
    fn bar_across_two_cubes_merges() {
        let gray = bar_volume();
        let grid = generate_grid([40, 12, 12], [24, 12, 12], [8, 0, 0]).unwrap();
        assert_eq!(grid.len(), 2);
        let parts: Vec<_> = grid
            .iter()
            .map(|s| {
                let g = gray.crop(s.offset, s.dims).unwrap();
                let mut lv = flood_fill_segment(&g, None, &SeedPolicy::Grid { spacing: 1 }, 100).unwrap();
                lv.provenance = Provenance::Subvolume(s.index);
                (*s, lv)
            })
            .collect();
        let (global, graph) = reconcile(&parts, &ReconcileParams::default()).unwrap();
        assert_eq!(global.label_set(), vec![1]);
        assert_eq!(graph.edges.len(), 1);
        assert_eq!(graph.edges[0].agreement, 8 * 16);
        let whole = flood_fill_segment(&gray, None, &SeedPolicy::Grid { spacing: 1 }, 100).unwrap();
        assert_eq!(canonical_relabel(global.labels()), canonical_relabel(whole.labels()));
    }

    #[test]
    fn disjoint_objects_stay_apart() {
        let dims = [30, 4, 4];
        let mut v = vec![0u32; 30 * 16];
        for i in 0..16 {
            v[i * 30 + 3] = 5;
            v[i * 30 + 26] = 6;
        }
        let labels = VoxelGrid::from_labels(dims, [1.0; 3], v).unwrap();
        let grid = generate_grid(dims, [20, 4, 4], [10, 0, 0]).unwrap();
        let (global, graph) = reconcile(&split(&labels, &grid), &ReconcileParams::default()).unwrap();
        assert!(graph.edges.is_empty());
        assert_eq!(global.label_set(), vec![1, 2]);
    }

    #[test]
    fn small_contacts_do_not_merge() {
        // two cubes agree on only 4 voxels
        let dims = [20, 2, 2];
        let mut v = vec![0u32; 80];
        for i in 0..4 {
            v[i * 20 + 9] = 1;
            v[i * 20 + 10] = 1;
        }
        let labels = VoxelGrid::from_labels(dims, [1.0; 3], v).unwrap();
        let grid = generate_grid(dims, [11, 2, 2], [2, 0, 0]).unwrap();
        let (_, graph) = reconcile(&split(&labels, &grid), &ReconcileParams::default()).unwrap();
        assert!(graph.edges.is_empty());
    }

    #[test]
    fn idempotent_and_order_independent() {
        let gray = bar_volume();
        let whole = flood_fill_segment(&gray, None, &SeedPolicy::Grid { spacing: 1 }, 100).unwrap();
        let grid = generate_grid([40, 12, 12], [16, 8, 8], [6, 4, 4]).unwrap();
        let parts = split(&whole.grid, &grid);
        let (g1, graph1) = reconcile(&parts, &ReconcileParams::default()).unwrap();
        let mut rev = parts.clone();
        rev.reverse();
        let (g2, graph2) = reconcile(&rev, &ReconcileParams::default()).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(graph1, graph2);
        let single = generate_grid([40, 12, 12], [40, 12, 12], [0, 0, 0]).unwrap();
        let (g3, _) = reconcile(&split(&g1.grid, &single), &ReconcileParams::default()).unwrap();
        assert_eq!(canonical_relabel(g3.labels()), canonical_relabel(g1.labels()));
    }

    #[test]
    fn inconsistent_grid_rejected() {
        let labels = VoxelGrid::from_labels([20, 2, 2], [1.0; 3], vec![0; 80]).unwrap();
        let grid = generate_grid([20, 2, 2], [11, 2, 2], [2, 0, 0]).unwrap();
        let mut parts = split(&labels, &grid);
        parts[1].0.offset[0] += 3;
        assert!(matches!(reconcile(&parts, &ReconcileParams::default()), Err(Error::InconsistentGrid(_))));
        let mut dup = split(&labels, &grid);
        dup[1].0.index = dup[0].0.index;
        assert!(reconcile(&dup, &ReconcileParams::default()).is_err());
    }

    #[test]
    fn merge_graph_json_roundtrip() {
        let gray = bar_volume();
        let whole = flood_fill_segment(&gray, None, &SeedPolicy::Grid { spacing: 1 }, 100).unwrap();
        let grid = generate_grid([40, 12, 12], [24, 12, 12], [8, 0, 0]).unwrap();
        let (_, graph) = reconcile(&split(&whole.grid, &grid), &ReconcileParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("merge_graph.json");
        graph.save(&p).unwrap();
        assert_eq!(MergeGraph::load(&p).unwrap(), graph);
        assert_eq!(graph.global_id(([1, 0, 0], 1)), Some(1));
    }
}
