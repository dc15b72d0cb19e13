//! Synthetic microscope data: band-limited textures, tile crops, smooth
//! warps and blob volumes. Everything is seeded and deterministic.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{Dims, VoxelGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, width as i64 - 1) as usize;
                acc += w * data[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, height as i64 - 1) as usize;
                acc += w * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Maps values linearly onto `[lo, hi]` and quantizes.
pub fn to_gray(data: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> GrayImage {
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    let px = data
        .iter()
        .map(|&v| (lo + (v - min) / span * (hi - lo)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(width as u32, height as u32, px).expect("size")
}

/// Band-limited random texture with features of roughly `feature_scale` px.
pub fn textured_image(width: u32, height: u32, feature_scale: f64, seed: u64) -> GrayImage {
    let (w, h) = (width as usize, height as usize);
    let mut r = rng(seed);
    let white: Vec<f64> = (0..w * h).map(|_| r.gen::<f64>()).collect();
    let coarse = gaussian_blur(&white, w, h, feature_scale);
    let fine = gaussian_blur(&white, w, h, (feature_scale / 3.0).max(0.7));
    let mix: Vec<f64> = coarse.iter().zip(&fine).map(|(c, f)| 3.0 * c + 0.5 * f).collect();
    to_gray(&mix, w, h, 10.0, 245.0)
}

pub fn noise_image(width: u32, height: u32, seed: u64) -> GrayImage {
    let mut r = rng(seed);
    GrayImage::from_fn(width, height, |_, _| Luma([r.gen()]))
}

pub fn crop(img: &GrayImage, x: u32, y: u32, width: u32, height: u32) -> GrayImage {
    image::imageops::crop_imm(img, x, y, width, height).to_image()
}

/// Replaces a rectangle with seeded noise, e.g. to destroy an overlap band.
pub fn scramble_region(img: &mut GrayImage, x: u32, y: u32, width: u32, height: u32, seed: u64) {
    let mut r = rng(seed);
    for yy in y..(y + height).min(img.height()) {
        for xx in x..(x + width).min(img.width()) {
            img.put_pixel(xx, yy, Luma([r.gen()]));
        }
    }
}

/// A two-tile section cut from one texture: tile b sits at
/// `(nominal_dx + deviation.0, deviation.1)` relative to tile a.
pub struct TilePair {
    pub a: GrayImage,
    pub b: GrayImage,
    pub true_offset: (i64, i64),
}

pub fn two_tile_section(
    tile: (u32, u32),
    overlap_frac: f64,
    deviation: (i64, i64),
    feature_scale: f64,
    seed: u64,
) -> TilePair {
    let (tw, th) = tile;
    let nominal_dx = tw as i64 - (overlap_frac * tw as f64 + 0.5).floor() as i64;
    let dx = nominal_dx + deviation.0;
    let dy = deviation.1;
    let margin = 2 * dy.unsigned_abs() as u32 + 4;
    let full = textured_image((dx as u32) + tw + 4, th + margin, feature_scale, seed);
    let ay = margin / 2;
    let by = (ay as i64 + dy) as u32;
    TilePair {
        a: crop(&full, 0, ay, tw, th),
        b: crop(&full, dx as u32, by, tw, th),
        true_offset: (dx, dy),
    }
}

/// Stamps a column of dark Gaussian spots into the overlap band of both
/// tiles. In tile `b` the spots sit `shift` px lower than the true offset
/// would put them, so on their own they suggest a wrong registration.
pub fn add_debris(pair: &mut TilePair, spots: usize, sigma: f64, depth: f64, shift: i64) {
    let (dx, dy) = pair.true_offset;
    let (w, h) = (pair.a.width() as i64, pair.a.height() as i64);
    let band = w - dx;
    let cx = dx + band / 2;
    let step = h / (spots as i64 + 1);
    for j in 1..=spots as i64 {
        let cy = j * step;
        stamp_spot(&mut pair.a, cx as f64, cy as f64, sigma, depth);
        stamp_spot(&mut pair.b, (cx - dx) as f64, (cy - dy + shift) as f64, sigma, depth);
    }
}

fn stamp_spot(img: &mut GrayImage, cx: f64, cy: f64, sigma: f64, depth: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    for y in (cy as i64 - r).max(0)..(cy as i64 + r + 1).min(img.height() as i64) {
        for x in (cx as i64 - r).max(0)..(cx as i64 + r + 1).min(img.width() as i64) {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let p = img.get_pixel_mut(x as u32, y as u32);
            let v = p[0] as f64 - depth * (-d2 / (2.0 * sigma * sigma)).exp();
            p[0] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Difficulty class of a section in the montage sweep corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTier {
    /// Clean overlap; registers at any octave window.
    Easy,
    /// Faint debris that only wins when the search starts very coarse.
    Moderate,
    /// Strong debris that needs a fine starting level.
    Severe,
    /// A real stage slip: the canvas is genuinely the wrong size.
    Floor,
}

pub const SWEEP_TILE: u32 = 512;
pub const SWEEP_OVERLAP: f64 = 0.05;
pub const SWEEP_SLIP: i64 = 40;

/// Two-tile sections for octave sweeps, `counts` per tier in tier order.
pub fn sweep_corpus(counts: [usize; 4], seed: u64) -> Vec<(SweepTier, TilePair)> {
    let tiers = [SweepTier::Easy, SweepTier::Moderate, SweepTier::Severe, SweepTier::Floor];
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (tier, &n) in tiers.iter().zip(&counts) {
        for _ in 0..n {
            let s: u64 = r.gen();
            let jitter = (r.gen_range(-3..=3), r.gen_range(-3..=3));
            let deviation = if *tier == SweepTier::Floor { (jitter.0, SWEEP_SLIP) } else { jitter };
            let mut pair = two_tile_section((SWEEP_TILE, SWEEP_TILE), SWEEP_OVERLAP, deviation, 1.5, s);
            match tier {
                SweepTier::Moderate => add_debris(&mut pair, 8, 6.0, 60.0, 40),
                SweepTier::Severe => add_debris(&mut pair, 8, 6.0, 78.0, 40),
                _ => {}
            }
            out.push((*tier, pair));
        }
    }
    out
}

/// Pulls each pixel from `src(x - u(x,y), y - v(x,y))` (bilinear, zero
/// outside), i.e. content moves by `(u, v)`.
pub fn warp_image(src: &GrayImage, field: impl Fn(f64, f64) -> (f64, f64)) -> GrayImage {
    let f = crate::imageops::FloatImage::from_gray(src);
    GrayImage::from_fn(src.width(), src.height(), |x, y| {
        let (u, v) = field(x as f64, y as f64);
        let val = f.sample(x as f64 - u, y as f64 - v).unwrap_or(0.0);
        Luma([(val + 0.5).floor().clamp(0.0, 255.0) as u8])
    })
}

/// Smooth sinusoidal displacement field with the given amplitude (px) and
/// wavelength (px); phases are seeded.
pub fn smooth_warp(amplitude: f64, wavelength: f64, seed: u64) -> impl Fn(f64, f64) -> (f64, f64) + Clone {
    let mut r = rng(seed);
    let p: [f64; 4] = std::array::from_fn(|_| r.gen::<f64>() * std::f64::consts::TAU);
    let k = std::f64::consts::TAU / wavelength;
    move |x, y| {
        (
            amplitude * (k * x + p[0]).sin() * (k * y + p[1]).cos(),
            amplitude * (k * y + p[2]).sin() * (k * x + p[3]).cos(),
        )
    }
}

/// Axis-aligned ellipsoid with integer center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: [i64; 3],
    pub radii: [f64; 3],
}

impl Blob {
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        let d = [x - self.center[0], y - self.center[1], z - self.center[2]];
        (0..3).map(|a| (d[a] as f64 / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn bbox(&self) -> ([i64; 3], [i64; 3]) {
        let lo = std::array::from_fn(|a| self.center[a] - self.radii[a].floor() as i64);
        let hi = std::array::from_fn(|a| self.center[a] + self.radii[a].floor() as i64);
        (lo, hi)
    }

    fn separated_from(&self, other: &Blob, gap: i64) -> bool {
        let (l1, h1) = self.bbox();
        let (l2, h2) = other.bbox();
        (0..3).any(|a| l1[a] > h2[a] + gap || l2[a] > h1[a] + gap)
    }
}

/// Places up to `count` non-touching blobs (bounding boxes at least `gap`
/// apart) with radii drawn from `radius_range`, fully inside `dims`.
pub fn random_blobs(dims: Dims, count: usize, radius_range: (f64, f64), gap: i64, seed: u64) -> Vec<Blob> {
    let mut r = rng(seed);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < count && attempts < count * 200 {
        attempts += 1;
        let radii: [f64; 3] = std::array::from_fn(|_| r.gen_range(radius_range.0..=radius_range.1));
        let mut center = [0i64; 3];
        let mut fits = true;
        for a in 0..3 {
            let rad = radii[a].ceil() as i64 + 1;
            if 2 * rad >= dims[a] as i64 {
                fits = false;
                break;
            }
            center[a] = r.gen_range(rad..dims[a] as i64 - rad);
        }
        if !fits {
            continue;
        }
        let blob = Blob { center, radii };
        if blobs.iter().all(|b| b.separated_from(&blob, gap)) {
            blobs.push(blob);
        }
    }
    blobs
}

/// Gray volume with bright blobs (value `fg`) on a darker background with
/// additive noise that never crosses `threshold`.
pub fn blob_volume(dims: Dims, blobs: &[Blob], fg: u8, bg: u8, noise: u8, seed: u64) -> VoxelGrid {
    let mut r = rng(seed);
    let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let inside = blobs.iter().any(|b| b.contains(x as i64, y as i64, z as i64));
                let base = if inside { fg } else { bg } as i32;
                let jitter = if noise > 0 { r.gen_range(-(noise as i32)..=noise as i32) } else { 0 };
                data[(z * dims[1] + y) * dims[0] + x] = (base + jitter).clamp(0, 255) as u8;
            }
        }
    }
    VoxelGrid::from_gray(dims, [1.0; 3], data).expect("dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_textures() {
        assert_eq!(textured_image(64, 32, 3.0, 9), textured_image(64, 32, 3.0, 9));
        assert_ne!(textured_image(64, 32, 3.0, 9), textured_image(64, 32, 3.0, 10));
    }

    #[test]
    fn tile_pair_geometry() {
        let p = two_tile_section((200, 100), 0.05, (3, -2), 3.0, 1);
        assert_eq!(p.true_offset, (190 + 3, -2));
        // b's pixel (0, 2) is a's pixel (dx, dy + 2)
        assert_eq!(p.b.get_pixel(0, 2), p.a.get_pixel(193, 0));
    }

    #[test]
    fn blobs_do_not_touch() {
        let blobs = random_blobs([64, 64, 64], 10, (3.0, 6.0), 2, 4);
        assert!(blobs.len() >= 5);
        for (i, a) in blobs.iter().enumerate() {
            for b in &blobs[i + 1..] {
                assert!(a.separated_from(b, 2));
            }
        }
    }
}
