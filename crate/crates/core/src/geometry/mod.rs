//! Surface meshes and TEASAR skeletons of labeled objects, with OBJ and
//! JSON export.

mod edt;
mod export;
mod mesh;
mod skeleton;

pub use edt::distance_to_boundary;
pub use export::{export_mesh, export_skeleton, import_mesh, import_skeleton, mesh_to_obj, parse_obj};
pub use mesh::{marching_cubes, mesh_all, Mesh};
pub use skeleton::{teasar_skeletonize, Skeleton, TeasarParams};
