//! Binary asset file: `MUCA`, version, (V, F, J, H), f64 arrays, then i64 lists.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::body::asset::{BodyModelAsset, BODY_JOINTS, SHAPE_DIM};
use crate::error::{MucError, Result};

pub const ASSET_MAGIC: &str = "MUCA";
pub const ASSET_VERSION: u32 = 1;

pub fn asset_to_bytes(asset: &BodyModelAsset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(ASSET_MAGIC.as_bytes());
    w.u32(ASSET_VERSION);
    for d in [asset.num_vertices(), asset.num_faces(), asset.num_joints(), asset.hand_joints_per_hand()] {
        w.u32(d as u32);
    }
    w.f64s(asset.template_vertices.iter().flatten().copied());
    w.f64s(asset.shape_dirs.iter().copied());
    w.f64s(asset.expr_dirs.iter().copied());
    w.f64s(asset.joint_regressor.iter().copied());
    w.f64s(asset.skin_weights.iter().copied());
    w.f64s(asset.uv_coords.iter().flatten().copied());
    for f in &asset.faces {
        f.iter().for_each(|&i| w.i64(i as i64));
    }
    asset.parent.iter().for_each(|&p| w.i64(p));
    w.i64(asset.face_region_vertices.len() as i64);
    asset.face_region_vertices.iter().for_each(|&v| w.i64(v as i64));
    asset.body_joint_ids.iter().for_each(|&j| w.i64(j));
    asset.hand_joint_ids.iter().for_each(|&j| w.i64(j));
    w.buf
}

fn index(x: i64, what: &str) -> Result<usize> {
    usize::try_from(x).map_err(|_| MucError::InvariantViolation(format!("negative {what} index {x}")))
}

pub fn asset_from_bytes(data: &[u8]) -> Result<BodyModelAsset> {
    let mut r = Reader::new(data, "asset");
    r.magic(ASSET_MAGIC)?;
    let version = r.u32()?;
    if version != ASSET_VERSION {
        return Err(MucError::VersionMismatch { found: version, expected: ASSET_VERSION });
    }
    let nv = r.u32()? as usize;
    let nf = r.u32()? as usize;
    let nj = r.u32()? as usize;
    let h = r.u32()? as usize;
    let tv = r.f64s(nv * 3)?;
    let shape_dirs = r.f64s(nv * 3 * SHAPE_DIM)?;
    let expr_dirs = r.f64s(nv * 3 * SHAPE_DIM)?;
    let joint_regressor = r.f64s(nj * nv)?;
    let skin_weights = r.f64s(nv * nj)?;
    let uv = r.f64s(nv * 2)?;
    let faces_raw = r.i64s(nf * 3)?;
    let parent = r.i64s(nj)?;
    let n_face_region = index(r.i64()?, "face region length")?;
    let face_region_raw = r.i64s(n_face_region)?;
    let body_joint_ids = r.i64s(BODY_JOINTS)?;
    let hand_joint_ids = r.i64s(2 * h)?;
    r.finish()?;

    let faces = faces_raw
        .chunks_exact(3)
        .map(|c| Ok([index(c[0], "face")?, index(c[1], "face")?, index(c[2], "face")?]))
        .collect::<Result<Vec<_>>>()?;
    let asset = BodyModelAsset {
        template_vertices: tv.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        faces,
        shape_dirs,
        expr_dirs,
        joint_regressor,
        parent,
        skin_weights,
        uv_coords: uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        face_region_vertices: face_region_raw.iter().map(|&v| index(v, "face region")).collect::<Result<_>>()?,
        body_joint_ids,
        hand_joint_ids,
    };
    asset.validate()?;
    Ok(asset)
}

pub fn save_asset(asset: &BodyModelAsset, path: &Path) -> Result<()> {
    write_file(path, &asset_to_bytes(asset))
}

pub fn load_asset(path: &Path) -> Result<BodyModelAsset> {
    asset_from_bytes(&read_file(path)?)
}

/// Hex SHA-256 of the serialized asset; datasets record it to catch mismatched assets.
pub fn asset_hash(asset: &BodyModelAsset) -> String {
    let digest = Sha256::digest(asset_to_bytes(asset));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::asset::make_toy_asset;

    #[test]
    fn round_trip_through_file() {
        let asset = make_toy_asset(200, 25, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.muca");
        save_asset(&asset, &path).unwrap();
        assert_eq!(load_asset(&path).unwrap(), asset);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = asset_to_bytes(&make_toy_asset(200, 25, 7).unwrap());
        let b = asset_to_bytes(&make_toy_asset(200, 25, 7).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, asset_to_bytes(&make_toy_asset(200, 25, 8).unwrap()));
    }

    #[test]
    fn distinct_load_errors() {
        let asset = make_toy_asset(64, 25, 1).unwrap();
        let bytes = asset_to_bytes(&asset);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(asset_from_bytes(&bad_magic), Err(MucError::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(asset_from_bytes(&bad_version), Err(MucError::VersionMismatch { found: 9, .. })));

        assert!(matches!(asset_from_bytes(&bytes[..bytes.len() - 5]), Err(MucError::Truncated(_))));

        let mut half = asset.clone();
        let nj = half.num_joints();
        half.skin_weights[..nj].iter_mut().for_each(|w| *w *= 0.5);
        assert!(matches!(asset_from_bytes(&asset_to_bytes(&half)), Err(MucError::InvariantViolation(_))));
    }
}
