//! Serial elastic alignment of a section stack.
//!
//! Each consecutive pair is block matched on its own. The meshes are then
//! composed from the first section down: section `i` is pulled toward the
//! place its matched content occupies in the already aligned section `i-1`,
//! and relaxed against its internal springs.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::blockmatch::{block_match_field, DisplacementField};
use super::render::render_aligned;
use super::spring::{relax_spring_mesh, CrossLink, SpringMesh, SpringParams};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignParams {
    pub spring: SpringParams,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Vectors below this confidence add no cross link.
    pub min_confidence: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            spring: SpringParams::default(),
            patch_radius: 24,
            search_radius: 12,
            min_confidence: 0.3,
        }
    }
}

/// Block matches section `b` against its predecessor `a`.
pub fn match_pair(a: &GrayImage, b: &GrayImage, params: &AlignParams) -> Result<DisplacementField> {
    block_match_field(a, b, params.spring.grid_spacing, params.patch_radius, params.search_radius)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SectionRelax {
    pub section: usize,
    pub iterations: usize,
    pub converged: bool,
    pub energies: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StackAlignment {
    pub meshes: Vec<SpringMesh>,
    pub relax: Vec<SectionRelax>,
}

/// Builds one mesh per section from the pairwise fields, where `fields[i]`
/// matches section `i + 1` against section `i`.
pub fn align_stack(dims: (u32, u32), fields: &[DisplacementField], params: &AlignParams) -> Result<StackAlignment> {
    let sp = &params.spring;
    let rest = SpringMesh::covering(dims.0 as usize, dims.1 as usize, sp.grid_spacing, sp.intra_stiffness)?;
    let mut meshes = vec![rest.clone()];
    let mut relax = Vec::with_capacity(fields.len() + 1);
    relax.push(SectionRelax {
        section: 0,
        iterations: 0,
        converged: true,
        energies: vec![0.0],
    });
    for (i, field) in fields.iter().enumerate() {
        if field.grid_spacing != sp.grid_spacing {
            return Err(Error::InvalidArgument(format!(
                "field {i} has spacing {} but the mesh uses {}",
                field.grid_spacing, sp.grid_spacing
            )));
        }
        let prev = &meshes[i];
        let mut mesh = rest.clone();
        for row in 0..field.rows.min(mesh.rows) {
            for col in 0..field.cols.min(mesh.cols) {
                let v = field.get(col, row);
                if v.confidence < params.min_confidence {
                    continue;
                }
                let node = mesh.node_index(col, row);
                let r = mesh.rest_position(node);
                let target = prev.map_point(r[0] - v.dx as f64, r[1] - v.dy as f64);
                mesh.cross_links.push(CrossLink {
                    node,
                    target,
                    stiffness: 1.0,
                    confidence: v.confidence,
                });
            }
        }
        // start from the predecessor's shape so relaxation only fixes the difference
        mesh.nodes.clone_from(&prev.nodes);
        let out = relax_spring_mesh(&mesh, sp.max_iters, sp.step, sp.eps)?;
        relax.push(SectionRelax {
            section: i + 1,
            iterations: out.iterations,
            converged: out.converged,
            energies: out.energies,
        });
        let mut relaxed = out.mesh;
        relaxed.cross_links.clear();
        meshes.push(relaxed);
    }
    Ok(StackAlignment { meshes, relax })
}

/// Matches, composes and renders a whole stack.
pub fn align_sections(sections: &[GrayImage], params: &AlignParams) -> Result<(Vec<GrayImage>, StackAlignment)> {
    let Some(first) = sections.first() else {
        return Ok((Vec::new(), StackAlignment { meshes: Vec::new(), relax: Vec::new() }));
    };
    let dims = sections.iter().fold(first.dimensions(), |(w, h), s| (w.max(s.width()), h.max(s.height())));
    let fields = sections
        .windows(2)
        .map(|p| match_pair(&p[0], &p[1], params))
        .collect::<Result<Vec<_>>>()?;
    let stack = align_stack(dims, &fields, params)?;
    let rendered = sections.iter().zip(&stack.meshes).map(|(s, m)| render_aligned(s, m)).collect();
    Ok((rendered, stack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::mean_residual;
    use crate::synth::{textured_image, warp_image};

    fn params() -> AlignParams {
        AlignParams {
            spring: SpringParams { grid_spacing: 32, ..SpringParams::default() },
            patch_radius: 16,
            search_radius: 8,
            min_confidence: 0.3,
        }
    }

    #[test]
    fn translated_stack_is_straightened() {
        let base = textured_image(200, 200, 4.0, 9);
        let shifts = [(0.0, 0.0), (4.0, -2.0), (6.0, 1.0)];
        let sections: Vec<GrayImage> = shifts.iter().map(|&(u, v)| warp_image(&base, move |_, _| (u, v))).collect();
        let (aligned, stack) = align_sections(&sections, &params()).unwrap();
        assert_eq!(stack.meshes.len(), 3);
        for i in 1..3 {
            let f = match_pair(&aligned[i - 1], &aligned[i], &params()).unwrap();
            let inner: Vec<_> = (1..f.rows - 1)
                .flat_map(|r| (1..f.cols - 1).map(move |c| (c, r)))
                .map(|(c, r)| f.get(c, r))
                .collect();
            assert!(inner.iter().all(|v| v.dx == 0 && v.dy == 0), "section {i}: {inner:?}");
            let raw = match_pair(&sections[i - 1], &sections[i], &params()).unwrap();
            assert!(mean_residual(&raw, 0.3) > 1.0);
        }
        for r in &stack.relax {
            assert!(r.energies.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn spacing_mismatch_is_rejected() {
        let f = DisplacementField { grid_spacing: 16, cols: 1, rows: 1, vectors: vec![] };
        assert!(align_stack((64, 64), &[f], &params()).is_err());
    }
}
