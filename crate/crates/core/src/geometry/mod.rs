//! Gripper mesh construction, object signed distance functions, and partial
//! point-cloud extraction.

mod finger;
mod mesh;
mod pointcloud;
mod sdf;
mod trimesh;

pub use finger::{build_finger_mesh, BlockExtent, BlockKind, FingerParams, TendonLaw};
pub use mesh::{tet_signed_volume, TetMesh};
pub use pointcloud::{extract_partial_pointcloud, GripperBounds};
pub use sdf::{Shape, ShapeSdf, GROUND_HEIGHT};
pub use trimesh::TriMesh;
