use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// One overlapped cube of a subvolume grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubvolumeSpec {
    pub index: [usize; 3],
    pub offset: [usize; 3],
    pub dims: Dims,
    pub overlap: [usize; 3],
}

impl SubvolumeSpec {
    pub fn end(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.offset[a] + self.dims[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.offset[a] && p[a] < self.offset[a] + self.dims[a])
    }

    /// Directory-style name `i-j-k`.
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.index[0], self.index[1], self.index[2])
    }

    /// Shared box with another cube, as `(offset, dims)`; `None` if disjoint.
    pub fn intersection(&self, other: &SubvolumeSpec) -> Option<([usize; 3], Dims)> {
        let lo: [usize; 3] = std::array::from_fn(|a| self.offset[a].max(other.offset[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| self.end()[a].min(other.end()[a]));
        (0..3)
            .all(|a| hi[a] > lo[a])
            .then(|| (lo, std::array::from_fn(|a| hi[a] - lo[a])))
    }
}

fn axis_positions(len: usize, cube: usize, stride: usize) -> Vec<usize> {
    if len <= cube {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut p = 0;
    while p + cube < len {
        out.push(p);
        p += stride;
    }
    let last = len - cube;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Tiles `volume` with cubes advancing by `cube - overlap`; the last cube on
/// each axis is pulled back to end at the boundary. Axes shorter than the
/// cube get one position and a cube clipped to the volume.
pub fn generate_grid(volume: Dims, cube: Dims, overlap: [usize; 3]) -> Result<Vec<SubvolumeSpec>> {
    for a in 0..3 {
        if volume[a] == 0 || cube[a] == 0 {
            return Err(Error::InvalidArgument("volume and cube dims must be positive".into()));
        }
        if cube[a] <= overlap[a] {
            return Err(Error::InvalidArgument(format!(
                "cube {} must exceed overlap {} on axis {}",
                cube[a], overlap[a], ['x', 'y', 'z'][a]
            )));
        }
    }
    let pos: [Vec<usize>; 3] = std::array::from_fn(|a| axis_positions(volume[a], cube[a], cube[a] - overlap[a]));
    let dims: Dims = std::array::from_fn(|a| cube[a].min(volume[a]));
    let mut out = Vec::with_capacity(pos[0].len() * pos[1].len() * pos[2].len());
    for (i, &x) in pos[0].iter().enumerate() {
        for (j, &y) in pos[1].iter().enumerate() {
            for (k, &z) in pos[2].iter().enumerate() {
                out.push(SubvolumeSpec {
                    index: [i, j, k],
                    offset: [x, y, z],
                    dims,
                    overlap,
                });
            }
        }
    }
    Ok(out)
}
