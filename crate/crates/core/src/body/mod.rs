//! Parametric body decoder: toy asset, blendshapes, skinning, normals and file formats.

mod asset;
pub mod diff;
mod io;
mod lbs;
mod normals;
mod obj;
mod params;
pub mod rotation;

pub use asset::{make_toy_asset, make_toy_asset_with, BodyModelAsset, ToyAssetConfig, BODY_JOINTS, SHAPE_DIM};
pub use io::{asset_from_bytes, asset_hash, asset_to_bytes, load_asset, save_asset, ASSET_MAGIC, ASSET_VERSION};
pub use lbs::{forward_kinematics, lbs_forward, local_rotations, regress_joints, shaped_vertices, PosedBody};
pub use normals::{compute_vertex_normals, VertexNormals, UP};
pub use obj::{export_obj, obj_string, read_obj_vertices};
pub use params::ParamSet;
