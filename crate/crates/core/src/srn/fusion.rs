use std::rc::Rc;

use crate::error::{ensure_len, MucError, Result};
use crate::jrn::{fuse_weighted, fuse_weighted_graph};
use crate::nn::graph::{Graph, Var};
use crate::srn::net::WeightMap;
use crate::srn::raster::NormalMap;

fn check_maps(maps: &[NormalMap], weights_len: usize) -> Result<(usize, usize)> {
    if maps.is_empty() {
        return Err(MucError::InvalidArgument("no maps to fuse".into()));
    }
    ensure_len("weight maps", maps.len(), weights_len)?;
    let (u, v) = (maps[0].u, maps[0].v);
    for m in maps {
        if (m.u, m.v) != (u, v) || m.kind != maps[0].kind {
            return Err(MucError::InvalidArgument("maps differ in kind or resolution".into()));
        }
    }
    Ok((u, v))
}

/// Masked per-channel weighted mean over views, renormalized to unit length.
pub fn fuse_normal_maps(maps: &[NormalMap], weights: &[WeightMap]) -> Result<NormalMap> {
    let (u, v) = check_maps(maps, weights.len())?;
    let p = u * v;
    for w in weights {
        ensure_len("weight map entries", 3 * p, w.len())?;
        if w.data.iter().any(|&x| !(x > 0.0)) {
            return Err(MucError::InvalidArgument("weight maps must be strictly positive".into()));
        }
    }
    let mut out = NormalMap::empty(maps[0].kind, u, v);
    for t in 0..p {
        if !maps.iter().any(|m| m.mask[t]) {
            continue;
        }
        let mut f = [0.0; 3];
        for ch in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for (m, w) in maps.iter().zip(weights) {
                if m.mask[t] {
                    let wk = w.data[ch * p + t];
                    num += wk * m.data[ch * p + t];
                    den += wk;
                }
            }
            f[ch] = num / den;
        }
        let len = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
        let n = if len > 0.0 { f.map(|x| x / len) } else { maps.iter().find(|m| m.mask[t]).unwrap().texel(t / v, t % v) };
        out.set_texel(t / v, t % v, n);
    }
    Ok(out)
}

/// Graph form of [`fuse_normal_maps`]; returns the fused `[3, U, V]` node and the union mask.
pub fn fuse_normal_maps_graph(g: &mut Graph, maps: &[NormalMap], weights: &[Var]) -> Result<(Var, Vec<bool>)> {
    let (u, v) = check_maps(maps, weights.len())?;
    let p = u * v;
    let union: Vec<bool> = (0..p).map(|t| maps.iter().any(|m| m.mask[t])).collect();
    let mut num = None;
    let mut den = None;
    for (m, &w) in maps.iter().zip(weights) {
        let mask3: Vec<f64> = (0..3 * p).map(|i| m.mask[i % p] as u8 as f64).collect();
        let mk = g.constant(&[3, u, v], mask3);
        let mw = g.mul(w, mk);
        let n = g.constant(&[3, u, v], m.data.clone());
        let term = g.mul(mw, n);
        num = Some(match num {
            None => term,
            Some(a) => g.add(a, term),
        });
        den = Some(match den {
            None => mw,
            Some(a) => g.add(a, mw),
        });
    }
    let hole3: Vec<f64> = (0..3 * p).map(|i| (!union[i % p]) as u8 as f64).collect();
    let hole3 = g.constant(&[3, u, v], hole3);
    let den = g.add(den.unwrap(), hole3);
    let f = g.div(num.unwrap(), den);
    let sq = g.mul(f, f);
    let sq = g.reshape(sq, &[3, p]);
    let s = g.sum_rows(sq);
    let hole: Vec<f64> = union.iter().map(|&c| (!c) as u8 as f64).collect();
    let hole = g.constant(&[p], hole);
    let s = g.add(s, hole);
    let len = g.sqrt(s);
    let len = g.broadcast_rows(len, 3);
    let len = g.reshape(len, &[3, u, v]);
    Ok((g.div(f, len), union))
}

/// Elementwise weighted mean of per-view coefficient vectors.
pub fn fuse_param_vectors(params: &[Vec<f64>], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = params.first().map_or(0, Vec::len);
    fuse_weighted(params, weights, &(0..n).collect::<Vec<_>>())
}

/// Graph form of [`fuse_param_vectors`] from `[N, D]` values and per-view `[D]` weights.
pub fn fuse_param_vectors_graph(g: &mut Graph, params: Var, weights: &[Var]) -> Var {
    let d = g.shape(params)[1];
    let rows: Vec<Var> = weights.iter().map(|&w| g.reshape(w, &[1, d])).collect();
    let w = g.concat(&rows);
    fuse_weighted_graph(g, params, w, &(0..d).collect::<Vec<_>>())
}

/// Mean L1 over channels of texels covered in both maps; `None` when they do not overlap.
pub fn masked_l1(fused: &NormalMap, gt: &NormalMap) -> Result<Option<f64>> {
    if (fused.u, fused.v) != (gt.u, gt.v) {
        return Err(MucError::InvalidArgument("surface maps differ in resolution".into()));
    }
    let p = fused.u * fused.v;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..p {
        if fused.mask[t] && gt.mask[t] {
            count += 1;
            for ch in 0..3 {
                total += (fused.data[ch * p + t] - gt.data[ch * p + t]).abs();
            }
        }
    }
    Ok((count > 0).then(|| total / (3 * count) as f64))
}

/// Graph form of [`masked_l1`] with the fused map as a node; zero when there is no overlap.
pub fn masked_l1_graph(g: &mut Graph, fused: Var, fused_mask: &[bool], gt: &NormalMap) -> Var {
    let p = gt.u * gt.v;
    let both: Vec<usize> = (0..p).filter(|&t| fused_mask[t] && gt.mask[t]).collect();
    if both.is_empty() {
        return g.constant(&[1], vec![0.0]);
    }
    let idx: Vec<usize> = (0..3).flat_map(|ch| both.iter().map(move |&t| ch * p + t)).collect();
    let target: Vec<f64> = idx.iter().map(|&i| gt.data[i]).collect();
    let n = idx.len();
    let picked = g.gather(fused, Rc::new(idx), &[n]);
    let target = g.constant(&[n], target);
    let d = g.sub(picked, target);
    let d = g.abs(d);
    g.mean(d)
}
