//! Pairwise tile registration by coarse-to-fine normalized cross-correlation.
//!
//! The pyramid is a chain of 2x box reductions. Only levels whose image width
//! lies in `[min_octave_px, max_octave_px]` take part: the coarsest admissible
//! level is searched exhaustively over the whole search window, and every finer
//! admissible level refines the running estimate by one step in each
//! direction. The estimate is scaled back to full resolution at the end, so a
//! low `max_octave_px` trades precision for speed and a low `min_octave_px`
//! starts the exhaustive search on images that may have lost the detail needed
//! to disambiguate the match.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::float::{ncc_at, FloatImage};
use crate::error::{Error, Result};

/// Overlaps smaller than this never produce a score.
const MIN_OVERLAP_PX: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MontageParams {
    pub min_octave_px: u32,
    pub max_octave_px: u32,
    pub nominal_overlap_frac: f64,
    pub search_margin_frac: f64,
    pub ncc_accept_threshold: f64,
}

impl Default for MontageParams {
    fn default() -> Self {
        Self {
            min_octave_px: 64,
            max_octave_px: 4096,
            nominal_overlap_frac: 0.05,
            search_margin_frac: 0.03,
            ncc_accept_threshold: 0.2,
        }
    }
}

impl MontageParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_octave_px == 0 || self.min_octave_px > self.max_octave_px {
            return Err(Error::InvalidArgument(format!(
                "octave bounds must satisfy 0 < min <= max, got {}..{}",
                self.min_octave_px, self.max_octave_px
            )));
        }
        if !(self.nominal_overlap_frac > 0.0 && self.nominal_overlap_frac < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "nominal overlap {} outside (0, 0.5)",
                self.nominal_overlap_frac
            )));
        }
        if !(0.0..0.5).contains(&self.search_margin_frac) {
            return Err(Error::InvalidArgument(format!(
                "search margin {} outside [0, 0.5)",
                self.search_margin_frac
            )));
        }
        if !(-1.0..=1.0).contains(&self.ncc_accept_threshold) {
            return Err(Error::InvalidArgument("ncc threshold outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Where tile `b` sits relative to tile `a` in the acquisition layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileRelation {
    RightOf,
    Below,
}

/// Offset of tile `b`'s origin in tile `a`'s frame, at full resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: i64,
    pub dy: i64,
    pub score: f64,
    /// Width of the finest pyramid level searched.
    pub octave_used: u32,
    /// Offset implied by the layout metadata alone.
    pub nominal: (i64, i64),
    pub low_confidence: bool,
}

impl Displacement {
    pub fn deviation(&self) -> (i64, i64) {
        (self.dx - self.nominal.0, self.dy - self.nominal.1)
    }
}

/// Inclusive full-resolution search bounds for `(dx, dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchWindow {
    pub x: (i64, i64),
    pub y: (i64, i64),
}

impl SearchWindow {
    fn scaled(&self, level: u32) -> SearchWindow {
        let f = 1i64 << level;
        SearchWindow {
            x: (self.x.0.div_euclid(f), ceil_div(self.x.1, f)),
            y: (self.y.0.div_euclid(f), ceil_div(self.y.1, f)),
        }
    }

    fn negated(&self) -> SearchWindow {
        SearchWindow {
            x: (-self.x.1, -self.x.0),
            y: (-self.y.1, -self.y.0),
        }
    }

    pub fn candidates(&self) -> usize {
        ((self.x.1 - self.x.0 + 1) * (self.y.1 - self.y.0 + 1)).max(0) as usize
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Nominal offset and search window for a tile pair of the given size.
pub fn nominal_geometry(width: u32, height: u32, relation: TileRelation, params: &MontageParams) -> ((i64, i64), SearchWindow) {
    let (w, h) = (width as f64, height as f64);
    let f = params.nominal_overlap_frac;
    let m = params.search_margin_frac;
    match relation {
        TileRelation::RightOf => {
            let along = width as i64;
            let nominal = along - round_half_up(f * w);
            let lo = along - round_half_up((f + m) * w);
            let hi = (along - round_half_up((f - m).max(0.0) * w)).min(along - 1);
            let slack = round_half_up(m * h);
            ((nominal, 0), SearchWindow { x: (lo, hi), y: (-slack, slack) })
        }
        TileRelation::Below => {
            let along = height as i64;
            let nominal = along - round_half_up(f * h);
            let lo = along - round_half_up((f + m) * h);
            let hi = (along - round_half_up((f - m).max(0.0) * h)).min(along - 1);
            let slack = round_half_up(m * w);
            ((0, nominal), SearchWindow { x: (-slack, slack), y: (lo, hi) })
        }
    }
}

/// Pyramid levels whose widths fall inside the octave bounds, as
/// `(coarsest, finest)` level indices. When no level fits, the level whose
/// width is closest to the bounds is used alone.
pub fn admissible_levels(width: u32, min_px: u32, max_px: u32) -> (u32, u32) {
    let widths: Vec<u32> = std::iter::successors(Some(width), |&w| (w > 1).then(|| w.div_ceil(2))).collect();
    let inside: Vec<u32> = (0..widths.len() as u32)
        .filter(|&l| (min_px..=max_px).contains(&widths[l as usize]))
        .collect();
    if let (Some(&finest), Some(&coarsest)) = (inside.first(), inside.last()) {
        return (coarsest, finest);
    }
    let distance = |w: u32| if w < min_px { min_px - w } else { w.saturating_sub(max_px) };
    let best = (0..widths.len() as u32)
        .min_by_key(|&l| (distance(widths[l as usize]), l))
        .unwrap_or(0);
    (best, best)
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dx: i64,
    dy: i64,
    score: f64,
    prior: f64,
}

impl Candidate {
    /// Higher score wins; ties go to the candidate closest to the nominal
    /// offset, then to the smaller (dy, dx).
    fn beats(&self, other: &Candidate) -> bool {
        const TIE: f64 = 1e-12;
        if self.score > other.score + TIE {
            return true;
        }
        if self.score < other.score - TIE {
            return false;
        }
        if self.prior != other.prior {
            return self.prior < other.prior;
        }
        (self.dy, self.dx) < (other.dy, other.dx)
    }
}

fn best_in(
    a: &FloatImage,
    b: &FloatImage,
    xs: (i64, i64),
    ys: (i64, i64),
    nominal: (f64, f64),
) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for dy in ys.0..=ys.1 {
        for dx in xs.0..=xs.1 {
            let Some(score) = ncc_at(a, b, dx, dy, MIN_OVERLAP_PX) else {
                continue;
            };
            let ex = dx as f64 - nominal.0;
            let ey = dy as f64 - nominal.1;
            let cand = Candidate { dx, dy, score, prior: ex * ex + ey * ey };
            if best.map_or(true, |b| cand.beats(&b)) {
                best = Some(cand);
            }
        }
    }
    best
}

/// Result of [`search_offset`]: full-resolution offset, its score at the
/// finest level searched, and the number of offsets evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchResult {
    pub dx: i64,
    pub dy: i64,
    pub score: f64,
    pub finest_level: u32,
    pub finest_width: u32,
    pub evaluated: usize,
}

/// Coarse-to-fine search for the offset of `b` in `a`'s frame within
/// `window`. Returns `None` when no candidate overlap has texture.
pub fn search_offset(
    a: &GrayImage,
    b: &GrayImage,
    nominal: (i64, i64),
    window: SearchWindow,
    min_octave_px: u32,
    max_octave_px: u32,
) -> Option<SearchResult> {
    let (coarsest, finest) = admissible_levels(a.width().max(b.width()), min_octave_px, max_octave_px);
    let mut pa = vec![FloatImage::from_gray(a)];
    let mut pb = vec![FloatImage::from_gray(b)];
    for _ in 0..coarsest {
        let na = pa.last().unwrap().halve();
        let nb = pb.last().unwrap().halve();
        pa.push(na);
        pb.push(nb);
    }
    let level_nominal = |l: u32| {
        let f = (1i64 << l) as f64;
        (nominal.0 as f64 / f, nominal.1 as f64 / f)
    };
    let w = window.scaled(coarsest);
    let mut evaluated = w.candidates();
    let mut best = best_in(&pa[coarsest as usize], &pb[coarsest as usize], w.x, w.y, level_nominal(coarsest));
    for level in (finest..coarsest).rev() {
        let Some(prev) = best else { break };
        let w = window.scaled(level);
        let cx = 2 * prev.dx;
        let cy = 2 * prev.dy;
        let xs = ((cx - 1).max(w.x.0), (cx + 1).min(w.x.1));
        let ys = ((cy - 1).max(w.y.0), (cy + 1).min(w.y.1));
        evaluated += ((xs.1 - xs.0 + 1) * (ys.1 - ys.0 + 1)).max(0) as usize;
        best = best_in(&pa[level as usize], &pb[level as usize], xs, ys, level_nominal(level)).or(
            // keep the coarse estimate if refinement found nothing scorable
            Some(Candidate { dx: cx, dy: cy, ..prev }),
        );
    }
    best.map(|c| {
        let f = 1i64 << finest;
        SearchResult {
            dx: c.dx * f,
            dy: c.dy * f,
            score: c.score,
            finest_level: finest,
            finest_width: pa[finest as usize].width as u32,
            evaluated,
        }
    })
}

/// Registers `tile_b` against `tile_a` for the given layout relation. A
/// score below `ncc_accept_threshold` is flagged, not rejected.
pub fn ncc_displacement(
    tile_a: &GrayImage,
    tile_b: &GrayImage,
    relation: TileRelation,
    params: &MontageParams,
) -> Result<Displacement> {
    params.validate()?;
    if tile_a.dimensions() != tile_b.dimensions() {
        return Err(Error::InvalidArgument(format!(
            "tiles differ in size: {:?} vs {:?}",
            tile_a.dimensions(),
            tile_b.dimensions()
        )));
    }
    let (w, h) = tile_a.dimensions();
    let (nominal, window) = nominal_geometry(w, h, relation, params);
    if window.candidates() == 0 || window.x.0 > window.x.1 || window.y.0 > window.y.1 {
        return Err(Error::InvalidArgument("empty search window".into()));
    }
    let result = search_offset(tile_a, tile_b, nominal, window, params.min_octave_px, params.max_octave_px);
    Ok(match result {
        Some(r) => Displacement {
            dx: r.dx,
            dy: r.dy,
            score: r.score,
            octave_used: r.finest_width,
            nominal,
            low_confidence: r.score < params.ncc_accept_threshold,
        },
        None => Displacement {
            dx: nominal.0,
            dy: nominal.1,
            score: -1.0,
            octave_used: 0,
            nominal,
            low_confidence: true,
        },
    })
}

/// Same search with the roles of the tiles exchanged; used to check the
/// antisymmetry of the registration.
pub fn search_offset_reversed(
    a: &GrayImage,
    b: &GrayImage,
    nominal: (i64, i64),
    window: SearchWindow,
    min_octave_px: u32,
    max_octave_px: u32,
) -> Option<SearchResult> {
    search_offset(b, a, (-nominal.0, -nominal.1), window.negated(), min_octave_px, max_octave_px)
}
