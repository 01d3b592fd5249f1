use serde::{Deserialize, Serialize};

use crate::body::{BodyModelAsset, PosedBody};
use crate::error::{ensure_len, MucError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Shape,
    Face,
}

/// Per-texel unit normals in UV space, stored `[3][U][V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub kind: MapKind,
    pub u: usize,
    pub v: usize,
    pub data: Vec<f64>,
    /// `[U][V]`, true where geometry covers the texel.
    pub mask: Vec<bool>,
}

impl NormalMap {
    pub fn empty(kind: MapKind, u: usize, v: usize) -> Self {
        NormalMap { kind, u, v, data: vec![0.0; 3 * u * v], mask: vec![false; u * v] }
    }

    pub fn texel(&self, iu: usize, iv: usize) -> [f64; 3] {
        let p = self.u * self.v;
        let t = iu * self.v + iv;
        [self.data[t], self.data[p + t], self.data[2 * p + t]]
    }

    pub fn set_texel(&mut self, iu: usize, iv: usize, n: [f64; 3]) {
        let p = self.u * self.v;
        let t = iu * self.v + iv;
        for ch in 0..3 {
            self.data[ch * p + t] = n[ch];
        }
        self.mask[t] = true;
    }

    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }

    /// Mask as 0/1 floats.
    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as u8 as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterDiagnostics {
    pub faces_drawn: usize,
    /// Faces skipped because their UV triangle has zero area.
    pub degenerate_faces: usize,
}

fn check_resolution(u: usize, v: usize) -> Result<()> {
    if u == 0 || v == 0 || u % 4 != 0 || v % 4 != 0 {
        return Err(MucError::InvalidArgument(format!("map resolution {u}x{v} must be positive multiples of 4")));
    }
    Ok(())
}

/// Rasterizes per-vertex normals over UV triangles. Texel `(iu, iv)` samples the point
/// `((iu + 0.5) / U, (iv + 0.5) / V)`; later faces overwrite earlier ones.
pub fn rasterize_uv(
    uv: &[[f64; 2]],
    faces: &[[usize; 3]],
    normals: &[[f64; 3]],
    kind: MapKind,
    resolution: (usize, usize),
) -> Result<(NormalMap, RasterDiagnostics)> {
    let (nu, nv) = resolution;
    check_resolution(nu, nv)?;
    ensure_len("normals per uv coordinate", uv.len(), normals.len())?;
    let mut map = NormalMap::empty(kind, nu, nv);
    let mut diag = RasterDiagnostics::default();
    for f in faces {
        if f.iter().any(|&i| i >= uv.len()) {
            return Err(MucError::InvalidArgument(format!("face {f:?} out of range")));
        }
        let [a, b, c] = f.map(|i| uv[i]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if area.abs() < 1e-14 {
            diag.degenerate_faces += 1;
            continue;
        }
        diag.faces_drawn += 1;
        let lo_u = a[0].min(b[0]).min(c[0]);
        let hi_u = a[0].max(b[0]).max(c[0]);
        let lo_v = a[1].min(b[1]).min(c[1]);
        let hi_v = a[1].max(b[1]).max(c[1]);
        let first = |lo: f64, n: usize| ((lo * n as f64 - 0.5).floor().max(0.0) as usize).min(n);
        let last = |hi: f64, n: usize| ((hi * n as f64 - 0.5).ceil().max(-1.0) as isize + 1).clamp(0, n as isize) as usize;
        for iu in first(lo_u, nu)..last(hi_u, nu) {
            let pu = (iu as f64 + 0.5) / nu as f64;
            for iv in first(lo_v, nv)..last(hi_v, nv) {
                let pv = (iv as f64 + 0.5) / nv as f64;
                let l1 = ((pu - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (pv - a[1])) / area;
                let l2 = ((b[0] - a[0]) * (pv - a[1]) - (pu - a[0]) * (b[1] - a[1])) / area;
                let l0 = 1.0 - l1 - l2;
                let eps = -1e-12;
                if l0 < eps || l1 < eps || l2 < eps {
                    continue;
                }
                let w = [l0, l1, l2];
                let mut n = [0.0; 3];
                for (k, &vi) in f.iter().enumerate() {
                    for ch in 0..3 {
                        n[ch] += w[k] * normals[vi][ch];
                    }
                }
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                let n = if len > 1e-12 {
                    n.map(|x| x / len)
                } else {
                    // opposing normals cancelled; take the dominant corner
                    let k = (0..3).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
                    normals[f[k]]
                };
                map.set_texel(iu, iv, n);
            }
        }
    }
    Ok((map, diag))
}

/// UV-space normal map of a posed body.
pub fn rasterize_normals(body: &PosedBody, asset: &BodyModelAsset, resolution: (usize, usize)) -> Result<NormalMap> {
    Ok(rasterize_normals_diag(body, asset, resolution)?.0)
}

pub fn rasterize_normals_diag(body: &PosedBody, asset: &BodyModelAsset, resolution: (usize, usize)) -> Result<(NormalMap, RasterDiagnostics)> {
    ensure_len("posed vertices", asset.num_vertices(), body.vertex_normals.len())?;
    rasterize_uv(&asset.uv_coords, &asset.faces, &body.vertex_normals, MapKind::Shape, resolution)
}

/// UV bounding rectangle `[u_min, u_max, v_min, v_max]` of the face region.
pub fn face_uv_rect(asset: &BodyModelAsset) -> Result<[f64; 4]> {
    if asset.face_region_vertices.is_empty() {
        return Err(MucError::InvalidArgument("asset has no face region".into()));
    }
    let mut r = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for &i in &asset.face_region_vertices {
        let [u, v] = asset.uv_coords[i];
        r = [r[0].min(u), r[1].max(u), r[2].min(v), r[3].max(v)];
    }
    if r[1] - r[0] <= 0.0 || r[3] - r[2] <= 0.0 {
        return Err(MucError::InvalidArgument("face region has zero UV extent".into()));
    }
    Ok(r)
}

/// Nearest-texel resample of the face rectangle to `U' x V'`.
pub fn crop_rect(map: &NormalMap, rect: [f64; 4], resolution: (usize, usize)) -> Result<NormalMap> {
    let (cu, cv) = resolution;
    check_resolution(cu, cv)?;
    let mut out = NormalMap::empty(MapKind::Face, cu, cv);
    for i in 0..cu {
        let u = rect[0] + (i as f64 + 0.5) / cu as f64 * (rect[1] - rect[0]);
        let su = ((u * map.u as f64).floor().max(0.0) as usize).min(map.u - 1);
        for j in 0..cv {
            let v = rect[2] + (j as f64 + 0.5) / cv as f64 * (rect[3] - rect[2]);
            let sv = ((v * map.v as f64).floor().max(0.0) as usize).min(map.v - 1);
            if map.mask[su * map.v + sv] {
                out.set_texel(i, j, map.texel(su, sv));
            }
        }
    }
    Ok(out)
}

pub fn crop_face(map: &NormalMap, asset: &BodyModelAsset, resolution: (usize, usize)) -> Result<NormalMap> {
    crop_rect(map, face_uv_rect(asset)?, resolution)
}

/// Face map rasterized straight into the face rectangle, the limit of [`crop_rect`] on an
/// ever finer source map.
pub fn rasterize_face(body: &PosedBody, asset: &BodyModelAsset, rect: [f64; 4], resolution: (usize, usize)) -> Result<NormalMap> {
    ensure_len("posed vertices", asset.num_vertices(), body.vertex_normals.len())?;
    let uv: Vec<[f64; 2]> = asset.uv_coords.iter().map(|p| [(p[0] - rect[0]) / (rect[1] - rect[0]), (p[1] - rect[2]) / (rect[3] - rect[2])]).collect();
    let (mut map, _) = rasterize_uv(&uv, &asset.faces, &body.vertex_normals, MapKind::Face, resolution)?;
    map.kind = MapKind::Face;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{lbs_forward, make_toy_asset, ParamSet};

    #[test]
    fn constant_field_over_whole_chart() {
        let uv = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let n = [0.0, 0.6, 0.8];
        let (m, d) = rasterize_uv(&uv, &[[0, 1, 2]], &[n; 3], MapKind::Shape, (8, 8)).unwrap();
        assert!(m.mask.iter().all(|&x| x));
        for iu in 0..8 {
            for iv in 0..8 {
                let t = m.texel(iu, iv);
                for ch in 0..3 {
                    assert!((t[ch] - n[ch]).abs() < 1e-15);
                }
            }
        }
        assert_eq!(d.faces_drawn, 1);
    }

    #[test]
    fn half_plane_split() {
        // left half (u < 0.5) +z, right half +x, as two disjoint quads
        let uv = vec![
            [0.0, 0.0], [0.5, 0.0], [0.5, 1.0], [0.0, 1.0],
            [0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.5, 1.0],
        ];
        let mut normals = vec![[0.0, 0.0, 1.0]; 4];
        normals.extend(vec![[1.0, 0.0, 0.0]; 4]);
        let faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]];
        let (m, _) = rasterize_uv(&uv, &faces, &normals, MapKind::Shape, (8, 12)).unwrap();
        for iu in 0..8 {
            for iv in 0..12 {
                let expect = if (iu as f64 + 0.5) / 8.0 < 0.5 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
                assert_eq!(m.texel(iu, iv), expect);
            }
        }
    }

    #[test]
    fn uncovered_region_is_zero_and_degenerates_counted() {
        let uv = [[0.0, 0.0], [0.2, 0.0], [0.0, 0.2], [0.5, 0.5]];
        let faces = [[0, 1, 2], [3, 3, 0]];
        let (m, d) = rasterize_uv(&uv, &faces, &[[0.0, 0.0, 1.0]; 4], MapKind::Shape, (8, 8)).unwrap();
        assert_eq!(d.degenerate_faces, 1);
        assert!(!m.mask[7 * 8 + 7]);
        assert_eq!(m.texel(7, 7), [0.0; 3]);
        assert!(rasterize_uv(&uv, &faces, &[[0.0; 3]; 4], MapKind::Shape, (6, 8)).is_err());
    }

    #[test]
    fn crop_of_top_left_quadrant() {
        let mut m = NormalMap::empty(MapKind::Shape, 16, 16);
        for iu in 0..16 {
            for iv in 0..16 {
                if (iu + iv) % 3 != 0 {
                    let a = (iu * 16 + iv) as f64 * 0.1;
                    m.set_texel(iu, iv, [a.cos(), a.sin(), 0.0]);
                }
            }
        }
        let c = crop_rect(&m, [0.0, 0.5, 0.0, 0.5], (8, 8)).unwrap();
        assert_eq!(c.kind, MapKind::Face);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(c.mask[i * 8 + j], m.mask[i * 16 + j]);
                assert_eq!(c.texel(i, j), m.texel(i, j));
            }
        }
        let full = crop_rect(&m, [0.0, 1.0, 0.0, 1.0], (16, 16)).unwrap();
        assert_eq!(full.data, m.data);
        assert_eq!(full.mask, m.mask);
        let blank = crop_rect(&NormalMap::empty(MapKind::Shape, 16, 16), [0.1, 0.4, 0.2, 0.3], (4, 4)).unwrap();
        assert!(blank.mask.iter().all(|&x| !x));
    }

    #[test]
    fn toy_asset_coverage_and_unit_texels() {
        let asset = make_toy_asset(200, 25, 7).unwrap();
        let body = lbs_forward(&asset, &ParamSet::zeros_for(&asset)).unwrap();
        let (m, d) = rasterize_normals_diag(&body, &asset, (32, 32)).unwrap();
        assert!(m.coverage() >= 0.3, "coverage {}", m.coverage());
        assert_eq!(d.degenerate_faces, 0);
        for iu in 0..32 {
            for iv in 0..32 {
                let t = m.texel(iu, iv);
                let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                if m.mask[iu * 32 + iv] {
                    assert!((n - 1.0).abs() < 1e-6);
                } else {
                    assert_eq!(n, 0.0);
                }
            }
        }
        let face = crop_face(&m, &asset, (16, 16)).unwrap();
        assert!(face.coverage() > 0.3, "face coverage {}", face.coverage());
    }

    #[test]
    fn direct_face_raster_matches_fine_crop() {
        let asset = make_toy_asset(200, 25, 7).unwrap();
        let mut p = ParamSet::zeros_for(&asset);
        p.p_body[14] = [0.2, -0.3, 0.1];
        let body = lbs_forward(&asset, &p).unwrap();
        let rect = face_uv_rect(&asset).unwrap();
        let direct = rasterize_face(&body, &asset, rect, (8, 8)).unwrap();
        assert_eq!(direct.kind, MapKind::Face);
        let fine = rasterize_normals(&body, &asset, (1024, 1024)).unwrap();
        let cropped = crop_rect(&fine, rect, (8, 8)).unwrap();
        let mut agree = 0;
        for t in 0..64 {
            let (a, b) = (direct.texel(t / 8, t % 8), cropped.texel(t / 8, t % 8));
            if direct.mask[t] == cropped.mask[t] && (0..3).all(|c| (a[c] - b[c]).abs() < 2e-2) {
                agree += 1;
            }
        }
        assert!(agree >= 58, "{agree}/64");
        assert!(direct.coverage() > 0.3);
    }
}
