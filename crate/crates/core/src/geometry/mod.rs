//! Geometric substrate: meshes, orthographic cameras, a deterministic
//! software rasterizer, and cross-view correspondences.

mod camera;
mod correspond;
mod mesh;
mod obj;
mod raster;

pub use camera::{canonical_rig, ring_rig, look_at, CameraView, ViewBuffers};
pub use correspond::{build_correspondence, downsample_view, CorrespondenceMap};
pub use mesh::{by_name, capsule, cube, sphere, torus, GeometryError, Mesh};
pub use obj::{load_obj, save_obj};
pub use raster::rasterize;
