use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{read_file, write_file};
use crate::body::lbs::PosedBody;
use crate::error::{MucError, Result};

/// Wavefront OBJ text: `v` lines, `vn` lines, then 1-based `f i//i j//j k//k` lines.
pub fn obj_string(body: &PosedBody, faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in &body.vertices {
        writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]).unwrap();
    }
    for n in &body.vertex_normals {
        writeln!(s, "vn {:?} {:?} {:?}", n[0], n[1], n[2]).unwrap();
    }
    for f in faces {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
    }
    s
}

pub fn export_obj(body: &PosedBody, faces: &[[usize; 3]], path: &Path) -> Result<()> {
    write_file(path, obj_string(body, faces).as_bytes())
}

/// Vertex positions from an OBJ file (other records ignored).
pub fn read_obj_vertices(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| MucError::Format(e.to_string()))?;
    text.lines()
        .filter_map(|l| l.strip_prefix("v "))
        .map(|rest| {
            let xs: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| MucError::Format(format!("obj vertex: {e}"))))
                .collect::<Result<_>>()?;
            if xs.len() != 3 {
                return Err(MucError::Format(format!("obj vertex with {} coordinates", xs.len())));
            }
            Ok([xs[0], xs[1], xs[2]])
        })
        .collect()
}
