use std::time::Instant;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::ncc::{ncc_displacement, MontageParams, TileRelation};
use crate::error::{Error, Result};
use crate::volume::{compose_canvas, SectionManifest};

pub const DEFAULT_FAILURE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MontageStatus {
    Ok,
    Suspect,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    /// Row-major tile indices.
    pub a: usize,
    pub b: usize,
    pub dx: i64,
    pub dy: i64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MontageReport {
    pub section: u32,
    pub pairs: Vec<PairReport>,
    pub canvas_dims: [u32; 2],
    pub status: MontageStatus,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct MontageOutcome {
    /// Per-tile origin on the canvas, row-major.
    pub offsets: Vec<(i64, i64)>,
    pub canvas: GrayImage,
    pub report: MontageReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureVerdict {
    Pass,
    Fail,
}

/// Canvas size implied by the layout and nominal overlap alone.
pub fn expected_canvas_dims(layout: (usize, usize), tile_dims: (u32, u32), nominal_overlap_frac: f64) -> (u64, u64) {
    let (rows, cols) = layout;
    let (w, h) = (tile_dims.0 as u64, tile_dims.1 as u64);
    let ov_x = (nominal_overlap_frac * w as f64 + 0.5).floor() as u64;
    let ov_y = (nominal_overlap_frac * h as f64 + 0.5).floor() as u64;
    (
        cols as u64 * w - (cols as u64 - 1) * ov_x,
        rows as u64 * h - (rows as u64 - 1) * ov_y,
    )
}

/// Flags a montage whose canvas deviates from the expected size by more than
/// `tolerance_frac` on either axis. Only dimensions are inspected.
pub fn detect_montage_failure(
    canvas_dims: (u32, u32),
    layout: (usize, usize),
    tile_dims: (u32, u32),
    nominal_overlap_frac: f64,
    tolerance_frac: f64,
) -> FailureVerdict {
    let (ew, eh) = expected_canvas_dims(layout, tile_dims, nominal_overlap_frac);
    let off = |actual: u32, expected: u64| {
        (actual as f64 - expected as f64).abs() / expected as f64 > tolerance_frac.max(0.0)
    };
    if off(canvas_dims.0, ew) || off(canvas_dims.1, eh) {
        FailureVerdict::Fail
    } else {
        FailureVerdict::Pass
    }
}

/// Registers adjacent tiles, chains their offsets along a row-major spanning
/// tree rooted at tile (0,0) and feathers the tiles onto one canvas.
/// Low-confidence pairs fall back to the nominal offset and mark the section
/// suspect; a canvas failing the size check marks it failed.
pub fn montage_tiles(
    section: u32,
    tiles: &[GrayImage],
    layout: (usize, usize),
    params: &MontageParams,
    tolerance_frac: f64,
) -> Result<MontageOutcome> {
    let start = Instant::now();
    let (rows, cols) = layout;
    if rows * cols != tiles.len() || tiles.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "layout {rows}x{cols} does not match {} tiles",
            tiles.len()
        )));
    }
    let dims = tiles[0].dimensions();
    if tiles.iter().any(|t| t.dimensions() != dims) {
        return Err(Error::InvalidArgument("tiles differ in size".into()));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut pairs = Vec::new();
    let mut suspect = false;
    // accepted offset of each tile relative to its spanning-tree parent
    let mut step = vec![(0i64, 0i64); tiles.len()];
    for r in 0..rows {
        for c in 0..cols {
            for (nr, nc, rel) in [(r, c + 1, TileRelation::RightOf), (r + 1, c, TileRelation::Below)] {
                if nr >= rows || nc >= cols {
                    continue;
                }
                let (a, b) = (idx(r, c), idx(nr, nc));
                let d = ncc_displacement(&tiles[a], &tiles[b], rel, params)?;
                pairs.push(PairReport { a, b, dx: d.dx, dy: d.dy, score: d.score });
                // row 0 chains left to right, every other tile hangs off the one above
                let tree_edge = rel == TileRelation::Below || r == 0;
                if !tree_edge {
                    if d.low_confidence {
                        suspect = true;
                    }
                    continue;
                }
                step[b] = if d.low_confidence {
                    suspect = true;
                    d.nominal
                } else {
                    (d.dx, d.dy)
                };
            }
        }
    }
    let mut offsets = vec![(0i64, 0i64); tiles.len()];
    for r in 0..rows {
        for c in 0..cols {
            let parent = if r == 0 {
                if c == 0 {
                    continue;
                }
                idx(0, c - 1)
            } else {
                idx(r - 1, c)
            };
            let i = idx(r, c);
            offsets[i] = (offsets[parent].0 + step[i].0, offsets[parent].1 + step[i].1);
        }
    }
    let canvas = compose_canvas(tiles, &offsets)?;
    let canvas_dims = canvas.dimensions();
    let verdict = detect_montage_failure(canvas_dims, layout, dims, params.nominal_overlap_frac, tolerance_frac);
    let status = if verdict == FailureVerdict::Fail {
        MontageStatus::Fail
    } else if suspect {
        MontageStatus::Suspect
    } else {
        MontageStatus::Ok
    };
    Ok(MontageOutcome {
        offsets,
        canvas,
        report: MontageReport {
            section,
            pairs,
            canvas_dims: [canvas_dims.0, canvas_dims.1],
            status,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

pub fn montage_section(manifest: &SectionManifest, params: &MontageParams, tolerance_frac: f64) -> Result<MontageOutcome> {
    let tiles = manifest.load_tiles()?;
    let params = MontageParams {
        nominal_overlap_frac: manifest.nominal_overlap_frac,
        ..params.clone()
    };
    montage_tiles(manifest.section_index, &tiles, manifest.layout, &params, tolerance_frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{scramble_region, two_tile_section};

    fn params() -> MontageParams {
        MontageParams {
            min_octave_px: 64,
            max_octave_px: 1024,
            nominal_overlap_frac: 0.1,
            search_margin_frac: 0.04,
            ncc_accept_threshold: 0.2,
        }
    }

    #[test]
    fn expected_width_for_two_large_tiles() {
        // 2 * 10833 - round(0.05 * 10833) = 21666 - 542
        assert_eq!(expected_canvas_dims((1, 2), (10833, 14000), 0.05), (21124, 14000));
    }

    #[test]
    fn failure_detector_uses_dims_only() {
        let exp = expected_canvas_dims((1, 2), (400, 300), 0.05);
        let exact = (exp.0 as u32, exp.1 as u32);
        assert_eq!(detect_montage_failure(exact, (1, 2), (400, 300), 0.05, 0.02), FailureVerdict::Pass);
        let wide = ((exp.0 as f64 * 1.3) as u32, exp.1 as u32);
        assert_eq!(detect_montage_failure(wide, (1, 2), (400, 300), 0.05, 0.02), FailureVerdict::Fail);
        let tall = (exact.0, exact.1 + 10);
        assert_eq!(detect_montage_failure(tall, (1, 2), (400, 300), 0.05, 0.02), FailureVerdict::Fail);
    }

    #[test]
    fn single_tile_is_its_own_canvas() {
        let t = crate::synth::textured_image(120, 90, 3.0, 1);
        let out = montage_tiles(0, std::slice::from_ref(&t), (1, 1), &params(), DEFAULT_FAILURE_TOLERANCE).unwrap();
        assert_eq!(out.canvas, t);
        assert_eq!(out.report.status, MontageStatus::Ok);
        assert!(out.report.pairs.is_empty());
    }

    #[test]
    fn two_tiles_land_at_ground_truth() {
        let pair = two_tile_section((400, 300), 0.1, (6, -4), 4.0, 3);
        let out = montage_tiles(7, &[pair.a, pair.b], (1, 2), &params(), DEFAULT_FAILURE_TOLERANCE).unwrap();
        let (dx, dy) = pair.true_offset;
        assert_eq!(out.offsets, vec![(0, 0), (dx, dy)]);
        // bounding box of tiles at (0,0) and (dx,dy)
        let w = (dx + 400) as u32;
        let h = (300 + dy.abs()) as u32;
        assert_eq!(out.report.canvas_dims, [w, h]);
        assert_eq!(out.report.status, MontageStatus::Ok);
        let json = serde_json::to_value(&out.report).unwrap();
        assert_eq!(json["status"], "OK");
        assert_eq!(json["pairs"][0]["dx"], dx);
    }

    #[test]
    fn destroyed_overlap_is_suspect_with_nominal_placement() {
        let mut pair = two_tile_section((400, 300), 0.1, (3, 2), 4.0, 4);
        scramble_region(&mut pair.a, 300, 0, 100, 300, 1);
        scramble_region(&mut pair.b, 0, 0, 100, 300, 2);
        let out = montage_tiles(1, &[pair.a, pair.b], (1, 2), &params(), DEFAULT_FAILURE_TOLERANCE).unwrap();
        assert_eq!(out.report.status, MontageStatus::Suspect);
        assert_eq!(out.offsets[1], (360, 0));
    }

    #[test]
    fn grid_layout_chains_offsets() {
        let full = crate::synth::textured_image(800, 600, 4.0, 12);
        let origins = [(0i64, 0i64), (183, 2), (-1, 184), (181, 187)];
        let tiles: Vec<GrayImage> = origins
            .iter()
            .map(|&(x, y)| crate::synth::crop(&full, (x + 10) as u32, (y + 10) as u32, 200, 200))
            .collect();
        let out = montage_tiles(2, &tiles, (2, 2), &params(), DEFAULT_FAILURE_TOLERANCE).unwrap();
        assert_eq!(out.offsets, origins.to_vec());
        assert_eq!(out.report.pairs.len(), 4);
    }
}
