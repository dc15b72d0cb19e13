use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dtype, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilitySource {
    External,
    Synthetic,
    IntensityProxy,
}

/// Gray8 grid read as probabilities, 0 -> 0.0 and 255 -> 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub grid: VoxelGrid,
    pub source: ProbabilitySource,
}

impl ProbabilityMap {
    pub fn new(grid: VoxelGrid, source: ProbabilitySource) -> Result<Self> {
        if grid.dtype() != Dtype::Gray8 {
            return Err(Error::DtypeMismatch {
                expected: Dtype::Gray8.name(),
                actual: grid.dtype().name(),
            });
        }
        Ok(Self { grid, source })
    }

    pub fn probability(&self, x: usize, y: usize, z: usize) -> f64 {
        self.grid.value(x, y, z) as f64 / 255.0
    }

    /// Probability threshold expressed on the stored 0..=255 scale, rounded up
    /// so that `value >= floor_level(p)` iff `value / 255 >= p`.
    pub fn floor_level(p: f64) -> u8 {
        (p.clamp(0.0, 1.0) * 255.0 - 1e-9).ceil().max(0.0) as u8
    }
}

/// Mean over the in-bounds part of a `(2r+1)` window along one axis.
fn box_pass(data: &[f64], dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % n;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(n - 1);
        let base = i - pos * stride;
        let sum: f64 = (lo..=hi).map(|p| data[base + p * stride]).sum();
        *o = sum / (hi - lo + 1) as f64;
    }
    out
}

/// Blurred, optionally inverted intensities stretched to the full 0..=255
/// range. A constant result is left as is.
pub fn intensity_proxy_probability(gray: &VoxelGrid, blur_radius: usize, invert: bool) -> Result<ProbabilityMap> {
    let dims = gray.dims();
    let mut data: Vec<f64> = gray.gray()?.iter().map(|&v| v as f64).collect();
    if blur_radius > 0 {
        for axis in 0..3 {
            data = box_pass(&data, dims, axis, blur_radius);
        }
    }
    if invert {
        data.iter_mut().for_each(|v| *v = 255.0 - *v);
    }
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let out: Vec<u8> = if max - min > 1e-9 {
        data.iter().map(|v| ((v - min) / (max - min) * 255.0 + 0.5).floor() as u8).collect()
    } else {
        data.iter().map(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
    };
    ProbabilityMap::new(VoxelGrid::from_gray(dims, gray.voxel_size(), out)?, ProbabilitySource::IntensityProxy)
}
