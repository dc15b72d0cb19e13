use image::GrayImage;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{reduce_blocks, DownsampleMethod, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub low_pct: f64,
    pub high_pct: f64,
    pub clip_low: u8,
    pub clip_high: u8,
    pub scale: u32,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            low_pct: 0.5,
            high_pct: 99.5,
            clip_low: 0,
            clip_high: 255,
            scale: 1,
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_pct && self.low_pct < self.high_pct && self.high_pct <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentiles must satisfy 0 <= low < high <= 100, got {} and {}",
                self.low_pct, self.high_pct
            )));
        }
        if self.clip_low >= self.clip_high {
            return Err(Error::InvalidArgument("clip_low must be below clip_high".into()));
        }
        if self.scale == 0 || !self.scale.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("scale {} is not a power of two", self.scale)));
        }
        Ok(())
    }
}

/// Nearest-rank percentile over the image histogram.
fn percentile(hist: &[u64; 256], total: u64, pct: f64) -> u8 {
    let rank = ((pct / 100.0) * (total - 1) as f64 + 0.5).floor() as u64;
    let mut seen = 0;
    for (v, &count) in hist.iter().enumerate() {
        seen += count;
        if seen > rank {
            return v as u8;
        }
    }
    255
}

/// Linear stretch mapping the `low_pct` percentile to 0 and `high_pct` to
/// 255, rounding half-up and clamping. A flat histogram leaves the image as is.
pub fn contrast_normalize(image: &GrayImage, params: &PreprocessParams) -> Result<GrayImage> {
    params.validate()?;
    let mut hist = [0u64; 256];
    for p in image.pixels() {
        hist[p[0] as usize] += 1;
    }
    let total = image.width() as u64 * image.height() as u64;
    if total == 0 {
        return Ok(image.clone());
    }
    let lo = percentile(&hist, total, params.low_pct) as i64;
    let hi = percentile(&hist, total, params.high_pct) as i64;
    if hi <= lo {
        warn!("contrast_normalize: degenerate histogram (percentiles both {lo}), image unchanged");
        return Ok(image.clone());
    }
    let span = hi - lo;
    let lut: Vec<u8> = (0..256i64)
        .map(|v| {
            let num = (v - lo).clamp(0, span) * 255;
            ((2 * num + span) / (2 * span)) as u8
        })
        .collect();
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p[0] = lut[p[0] as usize];
    }
    Ok(out)
}

pub fn clip_artifacts(image: &GrayImage, params: &PreprocessParams) -> Result<GrayImage> {
    params.validate()?;
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p[0] = p[0].clamp(params.clip_low, params.clip_high);
    }
    Ok(out)
}

/// Box-downscales by `params.scale` (mean, half-up).
pub fn rescale(image: &GrayImage, params: &PreprocessParams) -> Result<GrayImage> {
    params.validate()?;
    if params.scale == 1 {
        return Ok(image.clone());
    }
    let grid = VoxelGrid::from_image(image, [1.0; 3])?;
    let s = params.scale as usize;
    reduce_blocks(&grid, [s, s, 1], DownsampleMethod::Mean)?.slice_image(0)
}

/// Clamp, stretch and rescale in that order.
pub fn preprocess(image: &GrayImage, params: &PreprocessParams) -> Result<GrayImage> {
    let clipped = clip_artifacts(image, params)?;
    let stretched = contrast_normalize(&clipped, params)?;
    rescale(&stretched, params)
}
