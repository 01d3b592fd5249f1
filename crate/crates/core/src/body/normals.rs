use nalgebra::Vector3;

use crate::error::{MucError, Result};

/// Fallback normal for vertices without incident area.
pub const UP: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct VertexNormals {
    pub normals: Vec<[f64; 3]>,
    /// True where the vertex had no incident face area and got [`UP`].
    pub degenerate: Vec<bool>,
}

/// Area-weighted vertex normals; counter-clockwise faces point toward the viewer.
pub fn compute_vertex_normals(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<VertexNormals> {
    let nv = vertices.len();
    let mut acc = vec![Vector3::<f64>::zeros(); nv];
    for f in faces {
        if f.iter().any(|&i| i >= nv) {
            return Err(MucError::InvalidArgument(format!("face {f:?} out of range for {nv} vertices")));
        }
        let [a, b, c] = f.map(|i| Vector3::from(vertices[i]));
        // Cross product length is twice the area, so summing it area-weights.
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    let mut degenerate = vec![false; nv];
    let normals = acc
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 1e-300 && len.is_finite() {
                (n / len).into()
            } else {
                degenerate[i] = true;
                UP
            }
        })
        .collect();
    Ok(VertexNormals { normals, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        (
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    #[test]
    fn planar_square_faces_up() {
        let (v, f) = square();
        let n = compute_vertex_normals(&v, &f).unwrap();
        assert!(n.normals.iter().all(|x| *x == [0.0, 0.0, 1.0]));
        assert!(n.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn mirrored_winding_negates() {
        let (v, f) = square();
        let flipped: Vec<[usize; 3]> = f.iter().map(|t| [t[0], t[2], t[1]]).collect();
        let n = compute_vertex_normals(&v, &flipped).unwrap();
        assert!(n.normals.iter().all(|x| *x == [0.0, 0.0, -1.0]));
    }

    #[test]
    fn isolated_vertex_is_flagged() {
        let (mut v, f) = square();
        v.push([5.0, 5.0, 5.0]);
        let n = compute_vertex_normals(&v, &f).unwrap();
        assert!(n.degenerate[4]);
        assert_eq!(n.normals[4], UP);
    }

    fn icosphere(levels: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vector3<f64>> = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vector3::from(*p).normalize())
        .collect();
        let mut f: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..levels {
            let mut cache = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| {
                *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a] + v[b]) / 2.0).normalize());
                    v.len() - 1
                })
            };
            let mut next = Vec::new();
            for [a, b, c] in f {
                let ab = mid(a, b, &mut v);
                let bc = mid(b, c, &mut v);
                let ca = mid(c, a, &mut v);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            f = next;
        }
        (v.iter().map(|p| (*p).into()).collect(), f)
    }

    #[test]
    fn icosphere_normals_are_radial() {
        let (v, f) = icosphere(4);
        let n = compute_vertex_normals(&v, &f).unwrap();
        for (p, q) in v.iter().zip(&n.normals) {
            let radial = Vector3::from(*p).normalize();
            let ang = radial.dot(&Vector3::from(*q)).clamp(-1.0, 1.0).acos();
            assert!(ang < 1e-2, "angular error {ang}");
            assert!((Vector3::from(*q).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_indices() {
        let (v, _) = square();
        assert!(compute_vertex_normals(&v, &[[0, 1, 9]]).is_err());
    }
}
