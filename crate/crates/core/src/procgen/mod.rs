//! Procedural geometry and imagery from grammar trees.

mod layout;
mod mesh;
mod obj;
mod raster;
mod scene;

use thiserror::Error;

pub use layout::{layout_cells, Layout, Rect};
pub use mesh::{expected_counts, generate_window_mesh, window_mesh, DepthConfig, Mesh, RING_FACES, RING_VERTICES};
pub use obj::{export_mesh_obj, export_obj, parse_obj, ObjObject};
pub use raster::{classify_pixel, rasterize_patch, PatchImage, PixelClass, StyleJitter, StyleParams, PATCH_PIXELS};
pub use scene::{instance_scene, InstancePlacement, Scene, Transform};

#[derive(Debug, Error)]
pub enum ProcgenError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("invalid depth settings: {0}")]
    Depth(String),
    #[error("unknown cluster {0:?}")]
    UnknownCluster(String),
    #[error("transform for cluster {0:?} is not invertible")]
    SingularTransform(String),
    #[error("OBJ line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error("patch image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProcgenError> = std::result::Result<T, E>;
