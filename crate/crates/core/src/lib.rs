//! Image, volume, segmentation and geometry kernels for reconstructing
//! neurons from serial-section electron micrographs.
//!
//! The modules map onto pipeline stages:
//!
//! * [`volume`]: chunked on-disk volumes, raster import, previews.
//! * [`imageops`]: tile montage, preprocessing and elastic section alignment.
//! * [`segment`]: probability masks, seeded watershed, flood-fill
//!   segmentation over overlapping subvolumes and their reconciliation.
//! * [`geometry`]: marching-cubes meshes and TEASAR skeletons.
//! * [`synth`]: synthetic microscope data for tests and simulations.

pub mod error;
pub mod geometry;
pub mod imageops;
pub mod segment;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
