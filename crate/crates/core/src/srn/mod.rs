//! Surface reweighting: UV normal maps, camera-conditioned weight maps, and weighted
//! normalization of normal maps and shape/expression coefficients.

mod fusion;
mod maps_io;
mod net;
mod raster;

pub use fusion::{fuse_normal_maps, fuse_normal_maps_graph, fuse_param_vectors, fuse_param_vectors_graph, masked_l1, masked_l1_graph};
pub use maps_io::{load_map, map_from_bytes, map_to_bytes, save_map, MAP_MAGIC, MAP_VERSION};
pub use net::{reduce_weight_vector, srn_weight_maps, Srn, SrnSpec, WeightMap};
pub use raster::{crop_face, crop_rect, face_uv_rect, rasterize_face, rasterize_normals, rasterize_normals_diag, rasterize_uv, MapKind, NormalMap, RasterDiagnostics};
