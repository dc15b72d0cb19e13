use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel extent along (x, y, z).
pub type Dims = [usize; 3];

/// Physical voxel size in nanometers along (x, y, z).
pub type VoxelSize = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Gray8,
    Label32,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::Gray8 => "gray8",
            Dtype::Label32 => "label32",
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::Gray8 => 1,
            Dtype::Label32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VoxelData {
    Gray8(Vec<u8>),
    Label32(Vec<u32>),
}

impl VoxelData {
    pub fn zeros(dtype: Dtype, len: usize) -> Self {
        match dtype {
            Dtype::Gray8 => VoxelData::Gray8(vec![0; len]),
            Dtype::Label32 => VoxelData::Label32(vec![0; len]),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::Gray8(_) => Dtype::Gray8,
            VoxelData::Label32(_) => Dtype::Label32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::Gray8(v) => v.len(),
            VoxelData::Label32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense 3D voxel array in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    voxel_size: VoxelSize,
    data: VoxelData,
}

pub(crate) fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "dims must be >= 1 on every axis, got {dims:?}"
        )));
    }
    Ok(())
}

fn check_voxel_size(voxel_size: VoxelSize) -> Result<()> {
    if voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size:?}"
        )));
    }
    Ok(())
}

impl VoxelGrid {
    pub fn zeros(dims: Dims, voxel_size: VoxelSize, dtype: Dtype) -> Result<Self> {
        check_dims(dims)?;
        check_voxel_size(voxel_size)?;
        Ok(Self {
            dims,
            voxel_size,
            data: VoxelData::zeros(dtype, dims[0] * dims[1] * dims[2]),
        })
    }

    pub fn from_data(dims: Dims, voxel_size: VoxelSize, data: VoxelData) -> Result<Self> {
        check_dims(dims)?;
        check_voxel_size(voxel_size)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {dims:?} ({expected} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn from_gray(dims: Dims, voxel_size: VoxelSize, data: Vec<u8>) -> Result<Self> {
        Self::from_data(dims, voxel_size, VoxelData::Gray8(data))
    }

    pub fn from_labels(dims: Dims, voxel_size: VoxelSize, data: Vec<u32>) -> Result<Self> {
        Self::from_data(dims, voxel_size, VoxelData::Label32(data))
    }

    /// Wraps a 2D raster as a single-slice grid.
    pub fn from_image(image: &GrayImage, voxel_size: VoxelSize) -> Result<Self> {
        let dims = [image.width() as usize, image.height() as usize, 1];
        Self::from_gray(dims, voxel_size, image.as_raw().clone())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut VoxelData {
        &mut self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }

    pub fn gray(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::Gray8(v) => Ok(v),
            VoxelData::Label32(_) => Err(Error::DtypeMismatch {
                expected: "gray8",
                actual: "label32",
            }),
        }
    }

    pub fn gray_mut(&mut self) -> Result<&mut [u8]> {
        match &mut self.data {
            VoxelData::Gray8(v) => Ok(v),
            VoxelData::Label32(_) => Err(Error::DtypeMismatch {
                expected: "gray8",
                actual: "label32",
            }),
        }
    }

    pub fn labels(&self) -> Result<&[u32]> {
        match &self.data {
            VoxelData::Label32(v) => Ok(v),
            VoxelData::Gray8(_) => Err(Error::DtypeMismatch {
                expected: "label32",
                actual: "gray8",
            }),
        }
    }

    pub fn labels_mut(&mut self) -> Result<&mut [u32]> {
        match &mut self.data {
            VoxelData::Label32(v) => Ok(v),
            VoxelData::Gray8(_) => Err(Error::DtypeMismatch {
                expected: "label32",
                actual: "gray8",
            }),
        }
    }

    /// Voxel value widened to u32 regardless of dtype.
    pub fn value(&self, x: usize, y: usize, z: usize) -> u32 {
        let i = self.index(x, y, z);
        match &self.data {
            VoxelData::Gray8(v) => v[i] as u32,
            VoxelData::Label32(v) => v[i],
        }
    }

    /// Copies out a sub-box. The box must lie inside the grid.
    pub fn crop(&self, offset: [usize; 3], dims: Dims) -> Result<VoxelGrid> {
        check_dims(dims)?;
        for axis in 0..3 {
            if offset[axis] + dims[axis] > self.dims[axis] {
                return Err(Error::OutOfBounds {
                    axis: AXES[axis],
                    start: offset[axis] as u64,
                    len: dims[axis] as u64,
                    limit: self.dims[axis] as u64,
                });
            }
        }
        let mut out = VoxelGrid::zeros(dims, self.voxel_size, self.dtype())?;
        copy_box(&self.data, self.dims, offset, &mut out.data, dims, [0; 3], dims);
        Ok(out)
    }

    /// Writes `other` into this grid at `offset`. Dtypes must agree.
    pub fn paste(&mut self, offset: [usize; 3], other: &VoxelGrid) -> Result<()> {
        if other.dtype() != self.dtype() {
            return Err(Error::DtypeMismatch {
                expected: self.dtype().name(),
                actual: other.dtype().name(),
            });
        }
        for axis in 0..3 {
            if offset[axis] + other.dims[axis] > self.dims[axis] {
                return Err(Error::OutOfBounds {
                    axis: AXES[axis],
                    start: offset[axis] as u64,
                    len: other.dims[axis] as u64,
                    limit: self.dims[axis] as u64,
                });
            }
        }
        let dims = self.dims;
        copy_box(&other.data, other.dims, [0; 3], &mut self.data, dims, offset, other.dims);
        Ok(())
    }

    /// Extracts z-slice `z` of a gray volume as a raster.
    pub fn slice_image(&self, z: usize) -> Result<GrayImage> {
        let gray = self.gray()?;
        if z >= self.dims[2] {
            return Err(Error::OutOfBounds {
                axis: 'z',
                start: z as u64,
                len: 1,
                limit: self.dims[2] as u64,
            });
        }
        let plane = self.dims[0] * self.dims[1];
        let data = gray[z * plane..(z + 1) * plane].to_vec();
        Ok(GrayImage::from_raw(self.dims[0] as u32, self.dims[1] as u32, data)
            .expect("plane length matches dims"))
    }
}

pub(crate) const AXES: [char; 3] = ['x', 'y', 'z'];

/// Copies an `extent` box from `src` (at `src_off`) into `dst` (at `dst_off`).
pub(crate) fn copy_box(
    src: &VoxelData,
    src_dims: Dims,
    src_off: [usize; 3],
    dst: &mut VoxelData,
    dst_dims: Dims,
    dst_off: [usize; 3],
    extent: Dims,
) {
    fn rows<T: Copy>(
        src: &[T],
        src_dims: Dims,
        src_off: [usize; 3],
        dst: &mut [T],
        dst_dims: Dims,
        dst_off: [usize; 3],
        extent: Dims,
    ) {
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                let s = ((src_off[2] + z) * src_dims[1] + src_off[1] + y) * src_dims[0] + src_off[0];
                let d = ((dst_off[2] + z) * dst_dims[1] + dst_off[1] + y) * dst_dims[0] + dst_off[0];
                dst[d..d + extent[0]].copy_from_slice(&src[s..s + extent[0]]);
            }
        }
    }
    match (src, dst) {
        (VoxelData::Gray8(s), VoxelData::Gray8(d)) => {
            rows(s, src_dims, src_off, d, dst_dims, dst_off, extent)
        }
        (VoxelData::Label32(s), VoxelData::Label32(d)) => {
            rows(s, src_dims, src_off, d, dst_dims, dst_off, extent)
        }
        _ => unreachable!("dtype checked by caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(VoxelGrid::zeros([0, 1, 1], [1.0; 3], Dtype::Gray8).is_err());
        assert!(VoxelGrid::from_gray([2, 2, 2], [1.0; 3], vec![0; 7]).is_err());
        assert!(VoxelGrid::zeros([1, 1, 1], [0.0, 1.0, 1.0], Dtype::Gray8).is_err());
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let data: Vec<u8> = (0..4 * 3 * 2).map(|v| v as u8).collect();
        let grid = VoxelGrid::from_gray([4, 3, 2], [1.0; 3], data).unwrap();
        let sub = grid.crop([1, 1, 1], [2, 2, 1]).unwrap();
        assert_eq!(sub.gray().unwrap(), &[17, 18, 21, 22]);
        let mut blank = VoxelGrid::zeros([4, 3, 2], [1.0; 3], Dtype::Gray8).unwrap();
        blank.paste([1, 1, 1], &sub).unwrap();
        assert_eq!(blank.value(2, 2, 1), 22);
        assert_eq!(blank.value(0, 0, 0), 0);
        assert!(grid.crop([3, 0, 0], [2, 1, 1]).is_err());
    }

    #[test]
    fn index_coords_roundtrip() {
        let grid = VoxelGrid::zeros([5, 4, 3], [1.0; 3], Dtype::Label32).unwrap();
        for i in 0..grid.len() {
            let [x, y, z] = grid.coords(i);
            assert_eq!(grid.index(x, y, z), i);
        }
    }
}
