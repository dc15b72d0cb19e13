use image::GrayImage;

use super::float::FloatImage;
use super::spring::SpringMesh;

/// Renders `section` through the mesh deformation: every mesh cell is split
/// into two triangles, and output pixels inside a deformed triangle pull
/// their value from the matching rest-frame point (bilinear). Pixels not
/// covered by the deformed mesh, or mapping outside the section, are 0.
pub fn render_aligned(section: &GrayImage, mesh: &SpringMesh) -> GrayImage {
    let (w, h) = (section.width() as usize, section.height() as usize);
    let src = FloatImage::from_gray(section);
    let mut out = vec![0u8; w * h];
    for r in 0..mesh.rows.saturating_sub(1) {
        for c in 0..mesh.cols.saturating_sub(1) {
            let i00 = mesh.node_index(c, r);
            let i10 = mesh.node_index(c + 1, r);
            let i01 = mesh.node_index(c, r + 1);
            let i11 = mesh.node_index(c + 1, r + 1);
            for tri in [[i00, i10, i11], [i00, i11, i01]] {
                let q = tri.map(|i| mesh.nodes[i]);
                let p = tri.map(|i| mesh.rest_position(i));
                raster_triangle(&src, q, p, w, h, &mut out);
            }
        }
    }
    GrayImage::from_raw(w as u32, h as u32, out).expect("buffer sized to section")
}

fn raster_triangle(src: &FloatImage, q: [[f64; 2]; 3], p: [[f64; 2]; 3], w: usize, h: usize, out: &mut [u8]) {
    const TOL: f64 = 1e-9;
    let det = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * (q[1][1] - q[0][1]);
    if det.abs() < 1e-12 {
        return;
    }
    let min_x = q.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = q.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
    let min_y = q.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = q.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    for y in min_y as usize..=max_y as usize {
        for x in min_x as usize..=max_x as usize {
            let (fx, fy) = (x as f64 - q[0][0], y as f64 - q[0][1]);
            let l1 = (fx * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * fy) / det;
            let l2 = ((q[1][0] - q[0][0]) * fy - fx * (q[1][1] - q[0][1])) / det;
            let l0 = 1.0 - l1 - l2;
            if l0 < -TOL || l1 < -TOL || l2 < -TOL {
                continue;
            }
            let sx = l0 * p[0][0] + l1 * p[1][0] + l2 * p[2][0];
            let sy = l0 * p[0][1] + l1 * p[1][1] + l2 * p[2][1];
            if let Some(v) = src.sample(sx, sy) {
                out[y * w + x] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
}
