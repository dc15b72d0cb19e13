use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::float::{correlation, FloatImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    pub dx: i32,
    pub dy: i32,
    pub confidence: f64,
}

/// Block-matching result sampled at grid nodes `(i * spacing, j * spacing)`.
/// A vector `(dx, dy)` at node `p` means the content of the first section at
/// `p - (dx, dy)` shows up in the second section at `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub grid_spacing: usize,
    pub cols: usize,
    pub rows: usize,
    pub vectors: Vec<FieldVector>,
}

impl DisplacementField {
    pub fn get(&self, col: usize, row: usize) -> FieldVector {
        self.vectors[row * self.cols + col]
    }

    pub fn node_position(&self, col: usize, row: usize) -> (usize, usize) {
        (col * self.grid_spacing, row * self.grid_spacing)
    }
}

fn pad_to(img: &GrayImage, w: u32, h: u32) -> FloatImage {
    let mut out = FloatImage {
        width: w as usize,
        height: h as usize,
        data: vec![0.0; (w * h) as usize],
    };
    for (x, y, p) in img.enumerate_pixels() {
        out.data[y as usize * w as usize + x as usize] = p[0] as f64;
    }
    out
}

fn match_node(
    a: &FloatImage,
    b: &FloatImage,
    px: i64,
    py: i64,
    patch_radius: i64,
    search_radius: i64,
) -> FieldVector {
    let (w, h) = (a.width as i64, a.height as i64);
    let xs = (px - patch_radius).max(0)..=(px + patch_radius).min(w - 1);
    let ys = (py - patch_radius).max(0)..=(py + patch_radius).min(h - 1);
    let all_zero = ys.clone().all(|y| xs.clone().all(|x| b.at(x as usize, y as usize) == 0.0));
    let zero = FieldVector { dx: 0, dy: 0, confidence: 0.0 };
    if all_zero {
        return zero;
    }
    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -search_radius..=search_radius {
        for dx in -search_radius..=search_radius {
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for y in ys.clone() {
                let ay = y - dy;
                if ay < 0 || ay >= h {
                    continue;
                }
                for x in xs.clone() {
                    let ax = x - dx;
                    if ax < 0 || ax >= w {
                        continue;
                    }
                    let vb = b.at(x as usize, y as usize);
                    let va = a.at(ax as usize, ay as usize);
                    n += 1.0;
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            if n < 4.0 {
                continue;
            }
            let Some(score) = correlation(n, sa, sb, saa, sbb, sab) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((s, bx, by)) => {
                    score > s + 1e-12
                        || ((score - s).abs() <= 1e-12 && (dx * dx + dy * dy, dy, dx) < (bx * bx + by * by, by, bx))
                }
            };
            if better {
                best = Some((score, dx, dy));
            }
        }
    }
    match best {
        Some((score, dx, dy)) => FieldVector {
            dx: dx as i32,
            dy: dy as i32,
            confidence: score.max(0.0),
        },
        None => zero,
    }
}

/// Matches a `(2r+1)^2` patch of `section_b` around every grid node against
/// `section_a` within `search_radius`. The smaller section is zero-padded.
pub fn block_match_field(
    section_a: &GrayImage,
    section_b: &GrayImage,
    grid_spacing: usize,
    patch_radius: usize,
    search_radius: usize,
) -> Result<DisplacementField> {
    if grid_spacing == 0 || patch_radius == 0 {
        return Err(Error::InvalidArgument("grid spacing and patch radius must be positive".into()));
    }
    let w = section_a.width().max(section_b.width());
    let h = section_a.height().max(section_b.height());
    let a = pad_to(section_a, w, h);
    let b = pad_to(section_b, w, h);
    let cols = (w as usize).div_ceil(grid_spacing);
    let rows = (h as usize).div_ceil(grid_spacing);
    let vectors = (0..cols * rows)
        .into_par_iter()
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            match_node(
                &a,
                &b,
                (c * grid_spacing) as i64,
                (r * grid_spacing) as i64,
                patch_radius as i64,
                search_radius as i64,
            )
        })
        .collect();
    Ok(DisplacementField {
        grid_spacing,
        cols,
        rows,
        vectors,
    })
}

/// Mean vector length over nodes with at least `min_confidence`.
pub fn mean_residual(field: &DisplacementField, min_confidence: f64) -> f64 {
    let used: Vec<f64> = field
        .vectors
        .iter()
        .filter(|v| v.confidence >= min_confidence)
        .map(|v| ((v.dx * v.dx + v.dy * v.dy) as f64).sqrt())
        .collect();
    if used.is_empty() {
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{crop, smooth_warp, textured_image, warp_image};

    #[test]
    fn identical_sections_have_zero_field() {
        let a = textured_image(128, 96, 3.0, 1);
        let f = block_match_field(&a, &a, 32, 12, 6).unwrap();
        assert_eq!((f.cols, f.rows), (4, 3));
        for v in &f.vectors {
            assert_eq!((v.dx, v.dy), (0, 0));
            assert!(v.confidence > 0.999);
        }
    }

    #[test]
    fn translation_is_recovered_everywhere() {
        let full = textured_image(200, 200, 3.0, 2);
        let a = crop(&full, 20, 20, 128, 128);
        // b(x) = a(x - (5,3))
        let b = crop(&full, 15, 17, 128, 128);
        let f = block_match_field(&a, &b, 32, 12, 8).unwrap();
        for v in &f.vectors {
            assert_eq!((v.dx, v.dy), (5, 3));
        }
    }

    #[test]
    fn smooth_warp_sampled_within_one_pixel() {
        let a = textured_image(256, 256, 3.0, 3);
        let warp = smooth_warp(4.0, 200.0, 7);
        let b = warp_image(&a, warp.clone());
        let f = block_match_field(&a, &b, 32, 12, 8).unwrap();
        for r in 1..f.rows - 1 {
            for c in 1..f.cols - 1 {
                let (x, y) = f.node_position(c, r);
                let (u, v) = warp(x as f64, y as f64);
                let got = f.get(c, r);
                assert!((got.dx as f64 - u).abs() <= 1.0 && (got.dy as f64 - v).abs() <= 1.0,
                    "node ({c},{r}) got {got:?} want ({u:.2},{v:.2})");
            }
        }
    }

    #[test]
    fn zero_patch_has_zero_confidence() {
        let a = textured_image(64, 64, 3.0, 4);
        let b = textured_image(24, 24, 2.0, 5);
        let f = block_match_field(&a, &b, 32, 8, 4).unwrap();
        // node (1,1) at (32,32) lies in b's zero padding
        let v = f.get(1, 1);
        assert_eq!((v.dx, v.dy, v.confidence), (0, 0, 0.0));
    }
}
