use std::fmt::Write as _;
use std::path::Path;

use super::mesh::Mesh;
use super::skeleton::Skeleton;
use crate::error::{Error, IoContext, Result};
use crate::volume::atomic_write;

/// Wavefront OBJ text. Coordinates use the shortest exact float form so
/// a reparse returns identical values.
pub fn mesh_to_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# object {}", mesh.object_id);
    let _ = writeln!(s, "o object_{}", mesh.object_id);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn parse_obj(text: &str, object_id: u32) -> Result<Mesh> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("obj line {}: {msg}", line + 1));
    let mut mesh = Mesh { object_id, ..Mesh::default() };
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for c in &mut v {
                    *c = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad(ln, "bad vertex"))?;
                }
                mesh.vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        head.parse::<u32>().ok().filter(|&i| i >= 1).map(|i| i - 1)
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad(ln, "bad face index"))?;
                if idx.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                mesh.faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len() as u32;
    if mesh.faces.iter().flatten().any(|&i| i >= n) {
        return Err(Error::InvalidArgument("obj face index out of range".into()));
    }
    Ok(mesh)
}

pub fn export_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), mesh_to_obj(mesh).as_bytes())
}

pub fn import_mesh(path: impl AsRef<Path>, object_id: u32) -> Result<Mesh> {
    let text = std::fs::read_to_string(path.as_ref()).at(path.as_ref())?;
    parse_obj(&text, object_id)
}

pub fn export_skeleton(skeleton: &Skeleton, path: impl AsRef<Path>) -> Result<()> {
    let bytes = serde_json::to_vec(skeleton).at(path.as_ref())?;
    atomic_write(path.as_ref(), &bytes)
}

/// Reads skeleton JSON. `object_id` fills in files that omit it.
pub fn import_skeleton(path: impl AsRef<Path>, object_id: u32) -> Result<Skeleton> {
    #[derive(serde::Deserialize)]
    struct Raw {
        object_id: Option<u32>,
        nodes: Vec<[f64; 4]>,
        edges: Vec<[u32; 2]>,
    }
    let bytes = std::fs::read(path.as_ref()).at(path.as_ref())?;
    let raw: Raw = serde_json::from_slice(&bytes).at(path.as_ref())?;
    let n = raw.nodes.len() as u32;
    if raw.edges.iter().flatten().any(|&i| i >= n) {
        return Err(Error::InvalidArgument("skeleton edge index out of range".into()));
    }
    Ok(Skeleton { object_id: raw.object_id.unwrap_or(object_id), nodes: raw.nodes, edges: raw.edges })
}
