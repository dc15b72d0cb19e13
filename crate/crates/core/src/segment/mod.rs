//! Probability masks, seeded watershed, overlapped subvolume grids, seeded
//! flood-fill segmentation and cross-cube reconciliation. All connectivity
//! is 6-neighbor.

mod flood;
mod grid;
mod labels;
mod mask;
mod prob;
mod reconcile;
mod seeds;
mod watershed;

pub use flood::{flood_fill_segment, grid_seeds, SeedPolicy};
pub use grid::{generate_grid, SubvolumeSpec};
pub use labels::{canonical_relabel, LabelVolume, Provenance};
pub use mask::{apply_mask, MaskIds};
pub use prob::{intensity_proxy_probability, ProbabilityMap, ProbabilitySource};
pub use reconcile::{reconcile, LabelNode, MergeEdge, MergeGraph, ReconcileParams};
pub use seeds::{Seed, SeedKind, SeedList};
pub use watershed::watershed3d;
