//! Montage, preprocessing and elastic alignment of section images.

mod align;
mod blockmatch;
mod float;
mod montage;
mod ncc;
mod preprocess;
mod render;
mod spring;

pub use align::{align_sections, align_stack, match_pair, AlignParams, SectionRelax, StackAlignment};
pub use blockmatch::{block_match_field, mean_residual, DisplacementField, FieldVector};
pub use float::{ncc_at, FloatImage};
pub use montage::{
    detect_montage_failure, expected_canvas_dims, montage_section, montage_tiles, FailureVerdict,
    MontageOutcome, MontageReport, MontageStatus, PairReport, DEFAULT_FAILURE_TOLERANCE,
};
pub use ncc::{
    admissible_levels, ncc_displacement, nominal_geometry, search_offset, search_offset_reversed,
    Displacement, MontageParams, SearchResult, SearchWindow, TileRelation,
};
pub use preprocess::{clip_artifacts, contrast_normalize, preprocess, rescale, PreprocessParams};
pub use render::render_aligned;
pub use spring::{relax_spring_mesh, CrossLink, RelaxOutcome, SpringMesh, SpringParams};
