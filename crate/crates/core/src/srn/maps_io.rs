//! Float-grid dump of normal and weight maps: magic "MUCM", version, kind, channels, U, V,
//! channel data, then the coverage mask as a 0/1 grid.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{MucError, Result};
use crate::srn::raster::{MapKind, NormalMap};

pub const MAP_MAGIC: &str = "MUCM";
pub const MAP_VERSION: u32 = 1;

pub fn map_to_bytes(map: &NormalMap) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAP_MAGIC.as_bytes());
    w.u32(MAP_VERSION);
    w.u32(match map.kind {
        MapKind::Shape => 0,
        MapKind::Face => 1,
    });
    w.u32(3);
    w.u32(map.u as u32);
    w.u32(map.v as u32);
    w.f64s(map.data.iter().copied());
    w.f64s(map.mask_f64());
    w.buf
}

pub fn map_from_bytes(data: &[u8]) -> Result<NormalMap> {
    let mut r = Reader::new(data, "map file");
    r.magic(MAP_MAGIC)?;
    let version = r.u32()?;
    if version != MAP_VERSION {
        return Err(MucError::VersionMismatch { found: version, expected: MAP_VERSION });
    }
    let kind = match r.u32()? {
        0 => MapKind::Shape,
        1 => MapKind::Face,
        k => return Err(MucError::Format(format!("unknown map kind {k}"))),
    };
    let channels = r.u32()?;
    if channels != 3 {
        return Err(MucError::Format(format!("{channels} channels, expected 3")));
    }
    let (u, v) = (r.u32()? as usize, r.u32()? as usize);
    let values = r.f64s(3 * u * v)?;
    let mask = r.f64s(u * v)?;
    r.finish()?;
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(MucError::InvariantViolation("mask entries must be 0 or 1".into()));
    }
    Ok(NormalMap { kind, u, v, data: values, mask: mask.iter().map(|&m| m == 1.0).collect() })
}

pub fn save_map(map: &NormalMap, path: &Path) -> Result<()> {
    write_file(path, &map_to_bytes(map))
}

pub fn load_map(path: &Path) -> Result<NormalMap> {
    map_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut m = NormalMap::empty(MapKind::Face, 4, 8);
        m.set_texel(1, 3, [0.6, 0.0, -0.8]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mucm");
        save_map(&m, &p).unwrap();
        assert_eq!(load_map(&p).unwrap(), m);
        let bytes = map_to_bytes(&m);
        assert!(matches!(map_from_bytes(&bytes[..bytes.len() - 1]), Err(MucError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(map_from_bytes(&bad), Err(MucError::VersionMismatch { .. })));
    }
}
