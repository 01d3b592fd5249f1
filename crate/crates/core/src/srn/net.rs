use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{camera_condition_vector, CameraParams};
use crate::error::{ensure_len, MucError, Result};
use crate::jrn::CONDITION_DIM;
use crate::nn::graph::{Graph, Var};
use crate::nn::{Activation, Mlp, MlpSpec, OutputActivation, ParamStore, Tensor, UNet, UNetSpec};
use crate::srn::raster::{MapKind, NormalMap};
use crate::body::SHAPE_DIM;

/// Strictly positive `[3, U, V]` weights for one view.
pub type WeightMap = Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrnSpec {
    pub shape_res: [usize; 2],
    pub face_res: [usize; 2],
    pub base_channels: usize,
    pub attn_dim: usize,
    pub reducer_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for SrnSpec {
    fn default() -> Self {
        SrnSpec { shape_res: [32, 32], face_res: [16, 16], base_channels: 16, attn_dim: 8, reducer_hidden: vec![32], activation: Activation::Gelu }
    }
}

impl SrnSpec {
    pub fn resolution(&self, kind: MapKind) -> (usize, usize) {
        let r = match kind {
            MapKind::Shape => self.shape_res,
            MapKind::Face => self.face_res,
        };
        (r[0], r[1])
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.shape_res, self.face_res] {
            if r[0] == 0 || r[1] == 0 || r[0] % 4 != 0 || r[1] % 4 != 0 {
                return Err(MucError::Config(format!("uv resolution {}x{} must be positive multiples of 4", r[0], r[1])));
            }
        }
        if self.base_channels == 0 || self.attn_dim == 0 {
            return Err(MucError::Config("srn channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Weight-map U-Nets and weight-vector reducers for the body-surface and face maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Srn {
    pub spec: SrnSpec,
    shape_unet: UNet,
    face_unet: UNet,
    shape_reducer: Mlp,
    face_reducer: Mlp,
}

impl Srn {
    /// Final layers start at zero so all weights begin at `softplus(0)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &SrnSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let unet = UNetSpec { in_channels: 3, base_channels: spec.base_channels, out_channels: 3, cond_dim: CONDITION_DIM, attn_dim: spec.attn_dim };
        let shape_unet = UNet::new(store, "srn.shape_unet", &unet, true, rng)?;
        let face_unet = UNet::new(store, "srn.face_unet", &unet, true, rng)?;
        let reducer = |res: [usize; 2]| {
            let mut w = vec![3 * (res[0] / 4) * (res[1] / 4)];
            w.extend(&spec.reducer_hidden);
            w.push(SHAPE_DIM);
            MlpSpec::new(w, spec.activation, OutputActivation::Softplus)
        };
        let shape_reducer = Mlp::new(store, "srn.shape_reducer", &reducer(spec.shape_res), true, rng)?;
        let face_reducer = Mlp::new(store, "srn.face_reducer", &reducer(spec.face_res), true, rng)?;
        Ok(Srn { spec: spec.clone(), shape_unet, face_unet, shape_reducer, face_reducer })
    }

    /// `softplus(unet(map * mask, camera))`, shape `[3, U, V]`.
    pub fn weight_map(&self, g: &mut Graph, store: &ParamStore, map: &NormalMap, camera: &CameraParams) -> Result<Var> {
        let (u, v) = self.spec.resolution(map.kind);
        if (map.u, map.v) != (u, v) {
            return Err(MucError::InvalidArgument(format!("{:?} map is {}x{}, network expects {u}x{v}", map.kind, map.u, map.v)));
        }
        let p = u * v;
        let masked: Vec<f64> = map.data.iter().enumerate().map(|(i, &x)| if map.mask[i % p] { x } else { 0.0 }).collect();
        let x = g.constant(&[3, u, v], masked);
        let c = g.constant(&[CONDITION_DIM], camera_condition_vector(camera).to_vec());
        let net = match map.kind {
            MapKind::Shape => &self.shape_unet,
            MapKind::Face => &self.face_unet,
        };
        let y = net.forward(g, store, x, c)?;
        Ok(g.softplus(y))
    }

    /// Pools a weight map by 4 and maps it to a positive 10-vector.
    pub fn weight_vector(&self, g: &mut Graph, store: &ParamStore, kind: MapKind, wmap: Var) -> Result<Var> {
        let (u, v) = self.spec.resolution(kind);
        if g.shape(wmap) != [3, u, v] {
            return Err(MucError::InvalidArgument(format!("weight map shape {:?}, expected [3, {u}, {v}]", g.shape(wmap))));
        }
        let pooled = g.avg_pool(wmap, 4);
        let flat = g.reshape(pooled, &[3 * (u / 4) * (v / 4)]);
        let mlp = match kind {
            MapKind::Shape => &self.shape_reducer,
            MapKind::Face => &self.face_reducer,
        };
        mlp.forward(g, store, flat)
    }
}

/// Weight map of one view.
pub fn srn_weight_maps(srn: &Srn, store: &ParamStore, map: &NormalMap, camera: &CameraParams) -> Result<WeightMap> {
    let mut g = Graph::new();
    let w = srn.weight_map(&mut g, store, map, camera)?;
    g.check_finite()?;
    Ok(Tensor::new(g.shape(w), g.value(w).to_vec()))
}

/// Weight vector from a weight map.
pub fn reduce_weight_vector(srn: &Srn, store: &ParamStore, kind: MapKind, wmap: &WeightMap) -> Result<Vec<f64>> {
    let (u, v) = srn.spec.resolution(kind);
    ensure_len("weight map entries", 3 * u * v, wmap.len())?;
    let mut g = Graph::new();
    let w = g.constant(&[3, u, v], wmap.data.clone());
    let out = srn.weight_vector(&mut g, store, kind, w)?;
    g.check_finite()?;
    Ok(g.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn small() -> (Srn, ParamStore) {
        let mut store = ParamStore::new();
        let spec = SrnSpec { shape_res: [8, 8], face_res: [4, 8], base_channels: 4, attn_dim: 4, reducer_hidden: vec![6], activation: Activation::Gelu };
        let srn = Srn::new(&mut store, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (srn, store)
    }

    fn map(kind: MapKind, u: usize, v: usize) -> NormalMap {
        let mut m = NormalMap::empty(kind, u, v);
        for iu in 0..u {
            for iv in 0..v {
                if (iu * 3 + iv) % 4 != 0 {
                    let a = (iu * v + iv) as f64;
                    let n = [a.sin(), a.cos(), 0.5];
                    let l = (n[0] * n[0] + n[1] * n[1] + 0.25f64).sqrt();
                    m.set_texel(iu, iv, n.map(|x| x / l));
                }
            }
        }
        m
    }

    fn randomize(store: &mut ParamStore) {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = r.random_range(-0.6..0.6));
        }
    }

    #[test]
    fn initial_weights_are_ln2() {
        let (srn, store) = small();
        let cam = CameraParams::identity([500.0, 500.0], [256.0, 256.0]);
        let w = srn_weight_maps(&srn, &store, &map(MapKind::Shape, 8, 8), &cam).unwrap();
        assert!(w.data.iter().all(|&x| x == LN_2));
        let v = reduce_weight_vector(&srn, &store, MapKind::Shape, &w).unwrap();
        assert_eq!(v, vec![LN_2; 10]);
    }

    #[test]
    fn random_weights_positive_and_deterministic() {
        let (srn, mut store) = small();
        randomize(&mut store);
        let cam = CameraParams::identity([500.0, 500.0], [256.0, 256.0]);
        let m = map(MapKind::Face, 4, 8);
        let a = srn_weight_maps(&srn, &store, &m, &cam).unwrap();
        let b = srn_weight_maps(&srn, &store, &m, &cam).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, vec![3, 4, 8]);
        assert!(a.data.iter().all(|&x| x > 0.0 && x.is_finite()));
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = Tensor::new(&[3, 4, 8], (0..96).map(|_| r.random_range(0.0..5.0)).collect());
            let v = reduce_weight_vector(&srn, &store, MapKind::Face, &w).unwrap();
            assert_eq!(v.len(), 10);
            assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let (srn, store) = small();
        let cam = CameraParams::identity([500.0, 500.0], [256.0, 256.0]);
        assert!(srn_weight_maps(&srn, &store, &map(MapKind::Shape, 16, 16), &cam).is_err());
        assert!(reduce_weight_vector(&srn, &store, MapKind::Shape, &Tensor::zeros(&[3, 4, 4])).is_err());
    }
}
