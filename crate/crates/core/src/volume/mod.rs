//! Chunked volume storage, in-memory voxel grids, raster import and previews.

mod grid;
mod preview;
mod raster;
mod section;
mod store;

pub use grid::{Dims, Dtype, VoxelData, VoxelGrid, VoxelSize};
pub use preview::{label_color, make_preview, Preview, PreviewImage};
pub use raster::{encode_png, load_gray_png, save_gray_png};
pub use section::{compose_canvas, import_section, SectionManifest};
pub use store::{
    atomic_write, mean_round_half_up, mode_smallest, reduce_blocks, ChunkedVolume, ChunkedVolumeManifest,
    DownsampleMethod, DEFAULT_CHUNK, MANIFEST_FILE,
};
