use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{VoxelGrid, VoxelSize};

/// Triangle surface in nanometers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub object_id: u32,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
                0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
            })
            .sum()
    }

    /// Number of faces on each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge borders exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_face_counts().len() as i64 + self.faces.len() as i64
    }

    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (std::array::from_fn(|a| lo[a].min(v[a])), std::array::from_fn(|a| hi[a].max(v[a])))
        }))
    }
}

/// Cube edges as `(corner with the lower coordinate, axis)`; corner bits are
/// x = 1, y = 2, z = 4.
fn cube_edges() -> [(u8, u8); 12] {
    let mut out = [(0u8, 0u8); 12];
    let mut n = 0;
    for axis in 0..3u8 {
        for c in 0..8u8 {
            if c & (1 << axis) == 0 {
                out[n] = (c, axis);
                n += 1;
            }
        }
    }
    out
}

fn edge_between(a: u8, b: u8) -> usize {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as u8;
    cube_edges().iter().position(|&e| e == (lo, axis)).expect("corners share an edge")
}

fn corner_pos(c: u8) -> [f64; 3] {
    [(c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64]
}

fn edge_mid(e: usize) -> [f64; 3] {
    let (c, axis) = cube_edges()[e];
    let mut p = corner_pos(c);
    p[axis as usize] += 0.5;
    p
}

/// Triangles (as cube edge indices) for each of the 256 inside/outside
/// corner patterns. On every face, diagonally opposite inside corners are
/// kept apart, so neighboring cells always agree on the shared face.
fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256u32).map(|case| triangulate_case(case as u8)).collect())
}

fn triangulate_case(case: u8) -> Vec<[u8; 3]> {
    let inside = |c: u8| case & (1 << c) != 0;
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3u8 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u8 {
            let base = side << axis;
            let ring = [base, base | 1 << u, base | 1 << u | 1 << v, base | 1 << v];
            let crossing: Vec<usize> = (0..4).filter(|&k| inside(ring[k]) != inside(ring[(k + 1) % 4])).collect();
            let mut connect = |e1: usize, e2: usize| {
                links[e1].push(e2);
                links[e2].push(e1);
            };
            match crossing.len() {
                2 => {
                    let e = |k: usize| edge_between(ring[k], ring[(k + 1) % 4]);
                    connect(e(crossing[0]), e(crossing[1]));
                }
                4 => {
                    for k in 0..4 {
                        if inside(ring[k]) {
                            connect(edge_between(ring[(k + 3) % 4], ring[k]), edge_between(ring[k], ring[(k + 1) % 4]));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if used[start] || links[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut prev = start;
        let mut cur = links[start][0];
        while cur != start {
            lp.push(cur);
            used[cur] = true;
            let next = if links[cur][0] == prev { links[cur][1] } else { links[cur][0] };
            prev = cur;
            cur = next;
        }
        // outward = from inside corners toward outside corners of the loop's edges
        let mut out = [0.0; 3];
        for &e in &lp {
            let (c, axis) = cube_edges()[e];
            let s = if inside(c) { 1.0 } else { -1.0 };
            out[axis as usize] += s;
        }
        let pts: Vec<[f64; 3]> = lp.iter().map(|&e| edge_mid(e)).collect();
        let mut n = [0.0; 3];
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            n[0] += (p[1] - q[1]) * (p[2] + q[2]);
            n[1] += (p[2] - q[2]) * (p[0] + q[0]);
            n[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        if n[0] * out[0] + n[1] * out[1] + n[2] * out[2] < 0.0 {
            lp.reverse();
        }
        for k in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[k] as u8, lp[k + 1] as u8]);
        }
    }
    tris
}

fn mesh_region(labels: &[u32], dims: [usize; 3], object_id: u32, lo: [usize; 3], hi: [usize; 3], voxel_size: VoxelSize) -> Mesh {
    let edges = cube_edges();
    let table = case_table();
    let at = |x: usize, y: usize, z: usize| labels[(z * dims[1] + y) * dims[0] + x] == object_id;
    let mut index: HashMap<[usize; 4], u32> = HashMap::new();
    let mut mesh = Mesh { object_id, ..Mesh::default() };
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let mut case = 0u8;
                for c in 0..8u8 {
                    if at(x + (c & 1) as usize, y + ((c >> 1) & 1) as usize, z + ((c >> 2) & 1) as usize) {
                        case |= 1 << c;
                    }
                }
                for tri in &table[case as usize] {
                    let face = tri.map(|e| {
                        let (c, axis) = edges[e as usize];
                        let key = [x + (c & 1) as usize, y + ((c >> 1) & 1) as usize, z + ((c >> 2) & 1) as usize, axis as usize];
                        *index.entry(key).or_insert_with(|| {
                            let mut p = [key[0] as f64, key[1] as f64, key[2] as f64];
                            p[axis as usize] += 0.5;
                            mesh.vertices.push(std::array::from_fn(|a| p[a] * voxel_size[a]));
                            mesh.vertices.len() as u32 - 1
                        })
                    });
                    mesh.faces.push(face);
                }
            }
        }
    }
    mesh
}

/// Marching cubes on the mask `label == object_id`. Cells span neighboring
/// voxel centers, so an object touching the volume border stays open there.
/// Voxel `i` sits at `i * voxel_size`; vertices sit on edge midpoints and are
/// shared between cells.
pub fn marching_cubes(labels: &VoxelGrid, object_id: u32, voxel_size: VoxelSize) -> Result<Mesh> {
    let data = labels.labels()?;
    let dims = labels.dims();
    let Some((lo, hi)) = bounding_boxes(data, dims).remove(&object_id) else {
        return Ok(Mesh { object_id, ..Mesh::default() });
    };
    Ok(mesh_region(data, dims, object_id, cell_lo(lo), cell_hi(hi, dims), voxel_size))
}

fn cell_lo(lo: [usize; 3]) -> [usize; 3] {
    lo.map(|v| v.saturating_sub(1))
}

fn cell_hi(hi: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| (hi[a] + 1).min(dims[a] - 1))
}

/// Inclusive voxel bounding box per nonzero label.
fn bounding_boxes(data: &[u32], dims: [usize; 3]) -> BTreeMap<u32, ([usize; 3], [usize; 3])> {
    let mut out: BTreeMap<u32, ([usize; 3], [usize; 3])> = BTreeMap::new();
    for (i, &l) in data.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        out.entry(l)
            .and_modify(|(lo, hi)| {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            })
            .or_insert((p, p));
    }
    out
}

/// One mesh per nonzero label, meshed in parallel.
pub fn mesh_all(labels: &VoxelGrid, voxel_size: VoxelSize) -> Result<BTreeMap<u32, Mesh>> {
    let data = labels.labels()?;
    let dims = labels.dims();
    let boxes: Vec<_> = bounding_boxes(data, dims).into_iter().collect();
    Ok(boxes
        .into_par_iter()
        .map(|(id, (lo, hi))| (id, mesh_region(data, dims, id, cell_lo(lo), cell_hi(hi, dims), voxel_size)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u32) -> VoxelGrid {
        let mut v = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    v.push(f(x, y, z));
                }
            }
        }
        VoxelGrid::from_labels(dims, [1.0; 3], v).unwrap()
    }

    #[test]
    fn table_is_small_and_corner_cases_are_single_triangles() {
        let t = case_table();
        assert!(t[0].is_empty() && t[255].is_empty());
        for case in 0..256 {
            assert!(!t[case].is_empty() || case == 0 || case == 255);
            assert!(t[case].len() <= 12);
        }
        for c in 0..8 {
            assert_eq!(t[1 << c].len(), 1);
            assert_eq!(t[255 - (1 << c)].len(), 1);
        }
        assert_eq!(t[1].len(), 1);
        assert_eq!(t[3].len(), 2);
    }

    #[test]
    fn empty_mask_gives_empty_mesh() {
        let g = volume([4, 4, 4], |_, _, _| 0);
        let m = marching_cubes(&g, 1, [1.0; 3]).unwrap();
        assert!(m.vertices.is_empty() && m.faces.is_empty());
    }

    #[test]
    fn single_voxel_is_a_closed_sphere() {
        let g = volume([3, 3, 3], |x, y, z| u32::from((x, y, z) == (1, 1, 1)));
        let m = marching_cubes(&g, 1, [1.0; 3]).unwrap();
        assert_eq!((m.vertices.len(), m.faces.len()), (6, 8));
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn every_interior_configuration_is_watertight() {
        // all 2x2x2 patterns embedded in a zero border
        for case in 1..256u32 {
            let g = volume([4, 4, 4], |x, y, z| {
                if (1..3).contains(&x) && (1..3).contains(&y) && (1..3).contains(&z) {
                    let c = (x - 1) | (y - 1) << 1 | (z - 1) << 2;
                    (case >> c) & 1
                } else {
                    0
                }
            });
            let m = marching_cubes(&g, 1, [1.0; 3]).unwrap();
            assert!(m.is_watertight(), "case {case}");
            assert!(m.faces.iter().all(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2]));
        }
    }

    #[test]
    fn faces_are_consistently_oriented() {
        let g = volume([8, 8, 8], |x, y, z| u32::from((2..6).contains(&x) && (2..5).contains(&y) && (3..6).contains(&z) && !(x == 5 && y == 4)));
        let m = marching_cubes(&g, 1, [1.0; 3]).unwrap();
        let mut directed = std::collections::HashSet::new();
        for f in &m.faces {
            for k in 0..3 {
                assert!(directed.insert((f[k], f[(k + 1) % 3])), "edge traversed twice in one direction");
            }
        }
    }

    #[test]
    fn anisotropic_scaling_and_bbox() {
        let g = volume([5, 5, 5], |x, y, z| u32::from((x, y, z) == (2, 2, 2)));
        let m = marching_cubes(&g, 1, [6.0, 6.0, 40.0]).unwrap();
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!(lo, [9.0, 9.0, 60.0]);
        assert_eq!(hi, [15.0, 15.0, 100.0]);
    }

    #[test]
    fn mesh_all_keys_and_disjoint_boxes() {
        let g = volume([12, 6, 6], |x, y, z| {
            if !(1..5).contains(&y) || !(1..5).contains(&z) {
                0
            } else if (1..4).contains(&x) {
                1
            } else if (7..10).contains(&x) {
                2
            } else {
                0
            }
        });
        let all = mesh_all(&g, [1.0; 3]).unwrap();
        assert_eq!(all.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        let (_, hi1) = all[&1].bounding_box().unwrap();
        let (lo2, _) = all[&2].bounding_box().unwrap();
        assert!(hi1[0] < lo2[0]);
        assert!(mesh_all(&volume([3, 3, 3], |_, _, _| 0), [1.0; 3]).unwrap().is_empty());
    }

    #[test]
    fn border_objects_stay_open() {
        let g = volume([4, 4, 4], |x, _, _| u32::from(x < 2));
        let m = marching_cubes(&g, 1, [1.0; 3]).unwrap();
        assert!(!m.is_empty());
        assert!(!m.is_watertight());
    }
}
