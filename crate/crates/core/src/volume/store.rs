//! On-disk chunked volumes.
//!
//! A dataset directory holds a single `info.json` manifest and one
//! subdirectory per pyramid level. Each chunk is a raw little-endian voxel
//! dump in x-fastest order at `<level>/<cx>-<cy>-<cz>.bin`, where `c*` are
//! chunk grid indices. Chunks at the upper volume boundary are clipped to the
//! volume extent. Chunks that were never written do not exist on disk and read
//! back as zeros.
//!
//! The store does no locking. Concurrent writers must touch disjoint chunks;
//! voxel-disjoint regions that share a chunk are safe only when written
//! sequentially.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{check_dims, copy_box, Dims, Dtype, VoxelData, VoxelGrid, VoxelSize, AXES};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "info.json";
pub const DEFAULT_CHUNK: Dims = [64, 64, 64];
const PYRAMID_TARGET: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkedVolumeManifest {
    pub dataset_name: String,
    pub dtype: Dtype,
    pub chunk_size: Dims,
    pub num_levels: usize,
    /// Extent of each level, finest first.
    pub dims: Vec<Dims>,
    pub voxel_size: Vec<VoxelSize>,
    /// Whether z is halved between levels along with x and y.
    #[serde(default = "default_true")]
    pub downsample_z: bool,
}

fn default_true() -> bool {
    true
}

fn halve(d: usize) -> usize {
    d.div_ceil(2)
}

impl ChunkedVolumeManifest {
    pub fn new(
        dataset_name: impl Into<String>,
        dtype: Dtype,
        dims: Dims,
        voxel_size: VoxelSize,
        chunk_size: Dims,
        num_levels: usize,
        downsample_z: bool,
    ) -> Result<Self> {
        check_dims(dims)?;
        if num_levels == 0 {
            return Err(Error::InvalidManifest("num_levels must be >= 1".into()));
        }
        let mut all_dims = vec![dims];
        let mut all_sizes = vec![voxel_size];
        for _ in 1..num_levels {
            let prev = *all_dims.last().unwrap();
            let prev_vs = *all_sizes.last().unwrap();
            let zf = if downsample_z { 2 } else { 1 };
            all_dims.push([halve(prev[0]), halve(prev[1]), prev[2].div_ceil(zf)]);
            all_sizes.push([prev_vs[0] * 2.0, prev_vs[1] * 2.0, prev_vs[2] * zf as f64]);
        }
        let manifest = Self {
            dataset_name: dataset_name.into(),
            dtype,
            chunk_size,
            num_levels,
            dims: all_dims,
            voxel_size: all_sizes,
            downsample_z,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Default pyramid: 64^3 chunks, halving until the largest halved axis is
    /// at most 512 voxels.
    pub fn with_default_pyramid(
        dataset_name: impl Into<String>,
        dtype: Dtype,
        dims: Dims,
        voxel_size: VoxelSize,
        downsample_z: bool,
    ) -> Result<Self> {
        check_dims(dims)?;
        let mut levels = 1;
        let mut d = dims;
        loop {
            let largest = if downsample_z { d[0].max(d[1]).max(d[2]) } else { d[0].max(d[1]) };
            if largest <= PYRAMID_TARGET {
                break;
            }
            d = [halve(d[0]), halve(d[1]), if downsample_z { halve(d[2]) } else { d[2] }];
            levels += 1;
        }
        Self::new(dataset_name, dtype, dims, voxel_size, DEFAULT_CHUNK, levels, downsample_z)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidManifest(m));
        if self.num_levels == 0 {
            return bad("num_levels must be >= 1".into());
        }
        if self.chunk_size.iter().any(|&c| c == 0) {
            return bad(format!("chunk_size must be >= 1, got {:?}", self.chunk_size));
        }
        if self.dims.len() != self.num_levels || self.voxel_size.len() != self.num_levels {
            return bad("dims and voxel_size must have one entry per level".into());
        }
        for (level, d) in self.dims.iter().enumerate() {
            if d.iter().any(|&v| v == 0) {
                return bad(format!("level {level} has a zero extent"));
            }
            if level > 0 {
                let p = self.dims[level - 1];
                let z = if self.downsample_z { halve(p[2]) } else { p[2] };
                if *d != [halve(p[0]), halve(p[1]), z] {
                    return bad(format!("level {level} dims {d:?} are not half of {p:?}"));
                }
            }
        }
        if self.voxel_size.iter().flatten().any(|&v| !(v > 0.0)) {
            return bad("voxel sizes must be positive".into());
        }
        Ok(())
    }

    pub fn level_dims(&self, level: usize) -> Result<Dims> {
        self.dims.get(level).copied().ok_or(Error::NoSuchLevel(level))
    }

    /// Number of chunks along each axis at `level`.
    pub fn chunk_grid(&self, level: usize) -> Result<[usize; 3]> {
        let d = self.level_dims(level)?;
        Ok([
            d[0].div_ceil(self.chunk_size[0]),
            d[1].div_ceil(self.chunk_size[1]),
            d[2].div_ceil(self.chunk_size[2]),
        ])
    }

    pub fn chunk_slots(&self, level: usize) -> Result<usize> {
        Ok(self.chunk_grid(level)?.iter().product())
    }

    /// Downsampling factor (x, y, z) from level 0 to `level`.
    pub fn level_factor(&self, level: usize) -> [usize; 3] {
        let xy = 1usize << level;
        [xy, xy, if self.downsample_z { xy } else { 1 }]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMethod {
    Mean,
    Mode,
}

/// Handle to a chunked dataset on disk.
#[derive(Clone, Debug)]
pub struct ChunkedVolume {
    root: PathBuf,
    manifest: ChunkedVolumeManifest,
}

impl ChunkedVolume {
    /// Creates the dataset, or opens it if an identical manifest is already
    /// present. A differing manifest is refused.
    pub fn create(manifest: ChunkedVolumeManifest, root: impl AsRef<Path>) -> Result<Self> {
        manifest.validate()?;
        let root = root.as_ref().to_path_buf();
        let info = root.join(MANIFEST_FILE);
        if info.exists() {
            let existing = Self::open(&root)?;
            if existing.manifest != manifest {
                return Err(Error::ManifestConflict(root));
            }
            return Ok(existing);
        }
        fs::create_dir_all(&root).at(&root)?;
        for level in 0..manifest.num_levels {
            let dir = root.join(level.to_string());
            fs::create_dir_all(&dir).at(&dir)?;
        }
        let text = serde_json::to_string_pretty(&manifest).at(&info)?;
        atomic_write(&info, text.as_bytes())?;
        Ok(Self { root, manifest })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let info = root.join(MANIFEST_FILE);
        if !info.exists() {
            return Err(Error::MissingDataset(root));
        }
        let text = fs::read_to_string(&info).at(&info)?;
        let manifest: ChunkedVolumeManifest = serde_json::from_str(&text).at(&info)?;
        manifest.validate()?;
        Ok(Self { root, manifest })
    }

    pub fn exists(root: impl AsRef<Path>) -> bool {
        root.as_ref().join(MANIFEST_FILE).exists()
    }

    pub fn manifest(&self) -> &ChunkedVolumeManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn chunk_path(&self, level: usize, index: [usize; 3]) -> PathBuf {
        self.root
            .join(level.to_string())
            .join(format!("{}-{}-{}.bin", index[0], index[1], index[2]))
    }

    /// Chunk files currently present at `level`, sorted by index.
    pub fn existing_chunks(&self, level: usize) -> Result<Vec<[usize; 3]>> {
        let dir = self.root.join(level.to_string());
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&dir).at(&dir)? {
            let entry = entry.at(&dir)?;
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".bin")) else {
                continue;
            };
            let parts: Vec<_> = stem.split('-').filter_map(|p| p.parse().ok()).collect();
            if parts.len() == 3 {
                out.push([parts[0], parts[1], parts[2]]);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Origin and extent of chunk `index` at `level`, clipped to the volume.
    fn chunk_box(&self, level: usize, index: [usize; 3]) -> Result<([usize; 3], Dims)> {
        let dims = self.manifest.level_dims(level)?;
        let cs = self.manifest.chunk_size;
        let mut origin = [0; 3];
        let mut extent = [0; 3];
        for a in 0..3 {
            origin[a] = index[a] * cs[a];
            extent[a] = cs[a].min(dims[a] - origin[a]);
        }
        Ok((origin, extent))
    }

    fn read_chunk(&self, level: usize, index: [usize; 3], extent: Dims) -> Result<Option<VoxelData>> {
        let path = self.chunk_path(level, index);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::Io { path, source: e }),
        };
        let n = extent.iter().product::<usize>();
        let dtype = self.manifest.dtype;
        if bytes.len() != n * dtype.bytes_per_voxel() {
            return Err(Error::InvalidManifest(format!(
                "chunk {} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                n * dtype.bytes_per_voxel()
            )));
        }
        Ok(Some(match dtype {
            Dtype::Gray8 => VoxelData::Gray8(bytes),
            Dtype::Label32 => VoxelData::Label32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }))
    }

    fn write_chunk(&self, level: usize, index: [usize; 3], data: &VoxelData) -> Result<()> {
        let path = self.chunk_path(level, index);
        let bytes: Vec<u8> = match data {
            VoxelData::Gray8(v) => v.clone(),
            VoxelData::Label32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        };
        atomic_write(&path, &bytes)
    }

    fn check_region(&self, level: usize, offset: [usize; 3], dims: Dims) -> Result<()> {
        let limit = self.manifest.level_dims(level)?;
        for a in 0..3 {
            if offset[a] + dims[a] > limit[a] {
                return Err(Error::OutOfBounds {
                    axis: AXES[a],
                    start: offset[a] as u64,
                    len: dims[a] as u64,
                    limit: limit[a] as u64,
                });
            }
        }
        Ok(())
    }

    /// Chunk indices intersecting the box at `level`.
    pub fn chunks_intersecting(&self, offset: [usize; 3], dims: Dims) -> Vec<[usize; 3]> {
        let cs = self.manifest.chunk_size;
        let lo: Vec<usize> = (0..3).map(|a| offset[a] / cs[a]).collect();
        let hi: Vec<usize> = (0..3).map(|a| (offset[a] + dims[a] - 1) / cs[a]).collect();
        let mut out = Vec::new();
        for cz in lo[2]..=hi[2] {
            for cy in lo[1]..=hi[1] {
                for cx in lo[0]..=hi[0] {
                    out.push([cx, cy, cz]);
                }
            }
        }
        out
    }

    pub fn write_cutout(&self, offset: [usize; 3], grid: &VoxelGrid) -> Result<()> {
        self.write_cutout_at(0, offset, grid)
    }

    /// Writes `grid` into `level`; chunks on the region boundary keep their
    /// voxels outside the region.
    pub fn write_cutout_at(&self, level: usize, offset: [usize; 3], grid: &VoxelGrid) -> Result<()> {
        if grid.dtype() != self.manifest.dtype {
            return Err(Error::DtypeMismatch {
                expected: self.manifest.dtype.name(),
                actual: grid.dtype().name(),
            });
        }
        let dims = grid.dims();
        self.check_region(level, offset, dims)?;
        for index in self.chunks_intersecting(offset, dims) {
            let (origin, extent) = self.chunk_box(level, index)?;
            let (lo, hi) = intersect(origin, extent, offset, dims);
            let covered = (0..3).all(|a| lo[a] == origin[a] && hi[a] == origin[a] + extent[a]);
            let mut chunk = if covered {
                VoxelData::zeros(self.manifest.dtype, extent.iter().product())
            } else {
                self.read_chunk(level, index, extent)?
                    .unwrap_or_else(|| VoxelData::zeros(self.manifest.dtype, extent.iter().product()))
            };
            let span = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
            copy_box(
                grid.data(),
                dims,
                sub(lo, offset),
                &mut chunk,
                extent,
                sub(lo, origin),
                span,
            );
            self.write_chunk(level, index, &chunk)?;
        }
        Ok(())
    }

    pub fn read_cutout(&self, offset: [usize; 3], dims: Dims, level: usize) -> Result<VoxelGrid> {
        check_dims(dims)?;
        if !self.root.join(MANIFEST_FILE).exists() {
            return Err(Error::MissingDataset(self.root.clone()));
        }
        self.check_region(level, offset, dims)?;
        let mut out = VoxelGrid::zeros(dims, self.manifest.voxel_size[level], self.manifest.dtype)?;
        for index in self.chunks_intersecting(offset, dims) {
            let (origin, extent) = self.chunk_box(level, index)?;
            let Some(chunk) = self.read_chunk(level, index, extent)? else {
                continue;
            };
            let (lo, hi) = intersect(origin, extent, offset, dims);
            let span = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
            copy_box(&chunk, extent, sub(lo, origin), out.data_mut(), dims, sub(lo, offset), span);
        }
        Ok(out)
    }

    /// Reads an entire level.
    pub fn read_level(&self, level: usize) -> Result<VoxelGrid> {
        let dims = self.manifest.level_dims(level)?;
        self.read_cutout([0; 3], dims, level)
    }

    /// Populates `level + 1` from `level` by reducing 2x2x2 blocks (2x2x1 when
    /// the manifest keeps z). Mean rounds half-up and is gray-only; mode breaks
    /// ties toward the smallest label and is label-only.
    pub fn downsample(&self, level: usize, method: DownsampleMethod) -> Result<()> {
        match (method, self.manifest.dtype) {
            (DownsampleMethod::Mean, Dtype::Gray8) | (DownsampleMethod::Mode, Dtype::Label32) => {}
            (m, d) => {
                return Err(Error::InvalidArgument(format!(
                    "{m:?} downsampling is not defined for {}",
                    d.name()
                )))
            }
        }
        let target = level + 1;
        if target >= self.manifest.num_levels {
            return Err(Error::NoSuchLevel(target));
        }
        let src_dims = self.manifest.level_dims(level)?;
        let zf = if self.manifest.downsample_z { 2 } else { 1 };
        let factor = [2, 2, zf];
        let [gx, gy, gz] = self.manifest.chunk_grid(target)?;
        for cz in 0..gz {
            for cy in 0..gy {
                for cx in 0..gx {
                    let (origin, extent) = self.chunk_box(target, [cx, cy, cz])?;
                    let src_off = [origin[0] * 2, origin[1] * 2, origin[2] * zf];
                    let src_ext = [
                        (extent[0] * 2).min(src_dims[0] - src_off[0]),
                        (extent[1] * 2).min(src_dims[1] - src_off[1]),
                        (extent[2] * zf).min(src_dims[2] - src_off[2]),
                    ];
                    let src = self.read_cutout(src_off, src_ext, level)?;
                    let reduced = reduce_blocks(&src, factor, method)?;
                    debug_assert_eq!(reduced.dims(), extent);
                    self.write_chunk(target, [cx, cy, cz], reduced.data())?;
                }
            }
        }
        Ok(())
    }

    /// Downsamples every level in turn.
    pub fn build_pyramid(&self) -> Result<()> {
        let method = match self.manifest.dtype {
            Dtype::Gray8 => DownsampleMethod::Mean,
            Dtype::Label32 => DownsampleMethod::Mode,
        };
        for level in 0..self.manifest.num_levels.saturating_sub(1) {
            self.downsample(level, method)?;
        }
        Ok(())
    }
}

fn sub(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn intersect(o1: [usize; 3], e1: Dims, o2: [usize; 3], e2: Dims) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = o1[a].max(o2[a]);
        hi[a] = (o1[a] + e1[a]).min(o2[a] + e2[a]);
    }
    (lo, hi)
}

/// Writes through a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// Mean of gray values, rounded half-up.
pub fn mean_round_half_up(values: &[u8]) -> u8 {
    let n = values.len() as u32;
    let sum: u32 = values.iter().map(|&v| v as u32).sum();
    ((2 * sum + n) / (2 * n)) as u8
}

/// Most frequent label; ties go to the smallest label.
pub fn mode_smallest(values: &[u32]) -> u32 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(label, _)| label)
        .unwrap_or(0)
}

/// Reduces non-overlapping `factor` blocks of `grid`; partial blocks at the
/// upper boundary reduce over the voxels they contain.
pub fn reduce_blocks(grid: &VoxelGrid, factor: [usize; 3], method: DownsampleMethod) -> Result<VoxelGrid> {
    let d = grid.dims();
    let out_dims = [
        d[0].div_ceil(factor[0]),
        d[1].div_ceil(factor[1]),
        d[2].div_ceil(factor[2]),
    ];
    let vs = grid.voxel_size();
    let out_vs = [
        vs[0] * factor[0] as f64,
        vs[1] * factor[1] as f64,
        vs[2] * factor[2] as f64,
    ];
    let n_out = out_dims.iter().product::<usize>();
    let mut gray_buf = Vec::with_capacity(8);
    let mut label_buf = Vec::with_capacity(8);
    let data = match (grid.data(), method) {
        (VoxelData::Gray8(src), DownsampleMethod::Mean) => {
            let mut out = vec![0u8; n_out];
            for oz in 0..out_dims[2] {
                for oy in 0..out_dims[1] {
                    for ox in 0..out_dims[0] {
                        gray_buf.clear();
                        for z in oz * factor[2]..((oz + 1) * factor[2]).min(d[2]) {
                            for y in oy * factor[1]..((oy + 1) * factor[1]).min(d[1]) {
                                for x in ox * factor[0]..((ox + 1) * factor[0]).min(d[0]) {
                                    gray_buf.push(src[grid.index(x, y, z)]);
                                }
                            }
                        }
                        out[(oz * out_dims[1] + oy) * out_dims[0] + ox] = mean_round_half_up(&gray_buf);
                    }
                }
            }
            VoxelData::Gray8(out)
        }
        (VoxelData::Label32(src), DownsampleMethod::Mode) => {
            let mut out = vec![0u32; n_out];
            for oz in 0..out_dims[2] {
                for oy in 0..out_dims[1] {
                    for ox in 0..out_dims[0] {
                        label_buf.clear();
                        for z in oz * factor[2]..((oz + 1) * factor[2]).min(d[2]) {
                            for y in oy * factor[1]..((oy + 1) * factor[1]).min(d[1]) {
                                for x in ox * factor[0]..((ox + 1) * factor[0]).min(d[0]) {
                                    label_buf.push(src[grid.index(x, y, z)]);
                                }
                            }
                        }
                        out[(oz * out_dims[1] + oy) * out_dims[0] + ox] = mode_smallest(&label_buf);
                    }
                }
            }
            VoxelData::Label32(out)
        }
        (data, m) => {
            return Err(Error::InvalidArgument(format!(
                "{m:?} downsampling is not defined for {}",
                data.dtype().name()
            )))
        }
    };
    VoxelGrid::from_data(out_dims, out_vs, data)
}
