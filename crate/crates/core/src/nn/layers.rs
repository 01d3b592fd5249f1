//! Dense layers, convolutions, camera-conditioned cross-attention and the small U-Net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MucError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    None,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

impl OutputActivation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            OutputActivation::None => x,
            OutputActivation::Softplus => g.softplus(x),
            OutputActivation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, output: OutputActivation) -> Self {
        MlpSpec { widths, activation, output }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(MucError::Config(format!("mlp widths {:?} need >= 2 positive entries", self.widths)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, zero: bool, rng: &mut R) -> Self {
        let w = if zero { Tensor::zeros(&[n_out, n_in]) } else { Tensor::randn(&[n_out, n_in], n_in, rng) };
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[n_out]));
        Linear { w, b, n_in, n_out }
    }

    /// `x: [n_in]` to `[n_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xc = g.reshape(x, &[self.n_in, 1]);
        let y = g.matmul(w, xc);
        let y = g.reshape(y, &[self.n_out]);
        g.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Random init; with `zero_last` the final layer starts at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &MlpSpec, zero_last: bool, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(store, &format!("{name}.{i}"), spec.widths[i], spec.widths[i + 1], zero_last && i + 1 == n, rng))
            .collect();
        Ok(Mlp { spec: spec.clone(), layers })
    }

    pub fn n_in(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    /// Output before the output activation.
    pub fn forward_logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        crate::error::ensure_len("mlp input", self.n_in(), g.value(x).len())?;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = self.spec.activation.apply(g, h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let z = self.forward_logits(g, store, x)?;
        Ok(self.spec.output.apply(g, z))
    }
}

/// Evaluates an MLP on a plain vector.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(&[input.len()], input.to_vec());
    let y = mlp.forward(&mut g, store, x)?;
    Ok(g.value(y).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = if zero { Tensor::zeros(&shape) } else { Tensor::randn(&shape, c_in * kernel * kernel, rng) };
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv2d { w, b, c_in, c_out, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Single-head attention from per-pixel features (queries) to one condition token (keys, values).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub cond_dim: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, cond_dim: usize, dim: usize, rng: &mut R) -> Self {
        let wq = store.add(format!("{name}.wq"), Tensor::randn(&[dim, channels], channels, rng));
        let wk = store.add(format!("{name}.wk"), Tensor::randn(&[dim, cond_dim], cond_dim, rng));
        let wv = store.add(format!("{name}.wv"), Tensor::randn(&[dim, cond_dim], cond_dim, rng));
        let wo = store.add(format!("{name}.wo"), Tensor::randn(&[channels, dim], dim, rng));
        CrossAttention { wq, wk, wv, wo, channels, cond_dim, dim }
    }

    /// `x: [C, H, W]`, `cond: [cond_dim]`; returns `x + attention(x, cond)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MucError::DimensionMismatch { context: "cross-attention input rank", expected: 3, found: s.len() });
        }
        crate::error::ensure_len("cross-attention channels", self.channels, s[0])?;
        crate::error::ensure_len("cross-attention condition", self.cond_dim, g.value(cond).len())?;
        let hw = s[1] * s[2];
        let (wq, wk, wv, wo) = (g.param(store, self.wq), g.param(store, self.wk), g.param(store, self.wv), g.param(store, self.wo));
        let xf = g.reshape(x, &[self.channels, hw]);
        let c = g.reshape(cond, &[self.cond_dim, 1]);
        let q = g.matmul(wq, xf); // [d, HW]
        let k = g.matmul(wk, c); // [d, 1]
        let v = g.matmul(wv, c); // [d, 1]
        let qt = g.transpose(q);
        let scores = g.matmul(qt, k); // [HW, 1], one key per query row
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let at = g.reshape(attn, &[1, hw]);
        let mixed = g.matmul(v, at); // [d, HW]
        let out = g.matmul(wo, mixed);
        let out = g.reshape(out, &s);
        Ok(g.add(x, out))
    }
}

/// Evaluates cross-attention on plain arrays.
pub fn cross_attention_forward(attn: &CrossAttention, store: &ParamStore, x: &Tensor, cond: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(&x.shape, x.data.clone());
    let c = g.constant(&[cond.len()], cond.to_vec());
    let y = attn.forward(&mut g, store, xv, c)?;
    Ok(Tensor::new(g.shape(y), g.value(y).to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub out_channels: usize,
    pub cond_dim: usize,
    pub attn_dim: usize,
}

/// Two stride-2 down blocks, two upsampling blocks with skips, cross-attention after each block.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    down1: Conv2d,
    down2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    head: Conv2d,
    attn: [CrossAttention; 4],
}

impl UNet {
    /// With `zero_head` the final 1x1 convolution starts at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &UNetSpec, zero_head: bool, rng: &mut R) -> Result<Self> {
        let (c, b) = (spec.in_channels, spec.base_channels);
        if c == 0 || b == 0 || spec.out_channels == 0 || spec.attn_dim == 0 {
            return Err(MucError::Config("u-net channel counts must be positive".into()));
        }
        let down1 = Conv2d::new(store, &format!("{name}.down1"), c, b, 3, 2, false, rng);
        let down2 = Conv2d::new(store, &format!("{name}.down2"), b, 2 * b, 3, 2, false, rng);
        let up1 = Conv2d::new(store, &format!("{name}.up1"), 2 * b, b, 3, 1, false, rng);
        let up2 = Conv2d::new(store, &format!("{name}.up2"), 2 * b, b, 3, 1, false, rng);
        let head = Conv2d::new(store, &format!("{name}.head"), b + c, spec.out_channels, 1, 1, zero_head, rng);
        let attn = [
            CrossAttention::new(store, &format!("{name}.attn_d1"), b, spec.cond_dim, spec.attn_dim, rng),
            CrossAttention::new(store, &format!("{name}.attn_d2"), 2 * b, spec.cond_dim, spec.attn_dim, rng),
            CrossAttention::new(store, &format!("{name}.attn_u1"), 2 * b, spec.cond_dim, spec.attn_dim, rng),
            CrossAttention::new(store, &format!("{name}.attn_u2"), b + c, spec.cond_dim, spec.attn_dim, rng),
        ];
        Ok(UNet { spec: spec.clone(), down1, down2, up1, up2, head, attn })
    }

    /// `x: [C, U, V]` with U, V divisible by 4; returns `[C_out, U, V]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MucError::DimensionMismatch { context: "u-net input rank", expected: 3, found: s.len() });
        }
        crate::error::ensure_len("u-net input channels", self.spec.in_channels, s[0])?;
        if s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(MucError::InvalidArgument(format!("u-net spatial size {}x{} not divisible by 4", s[1], s[2])));
        }
        let d1 = self.down1.forward(g, store, x);
        let d1 = g.gelu(d1);
        let d1 = self.attn[0].forward(g, store, d1, cond)?;
        let d2 = self.down2.forward(g, store, d1);
        let d2 = g.gelu(d2);
        let d2 = self.attn[1].forward(g, store, d2, cond)?;
        let u = g.upsample2x(d2);
        let u = self.up1.forward(g, store, u);
        let u = g.gelu(u);
        let u1 = g.concat(&[u, d1]);
        let u1 = self.attn[2].forward(g, store, u1, cond)?;
        let u = g.upsample2x(u1);
        let u = self.up2.forward(g, store, u);
        let u = g.gelu(u);
        let u2 = g.concat(&[u, x]);
        let u2 = self.attn[3].forward(g, store, u2, cond)?;
        Ok(self.head.forward(g, store, u2))
    }
}

/// Evaluates the U-Net on plain arrays.
pub fn unet_forward(net: &UNet, store: &ParamStore, input: &Tensor, cond: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(&input.shape, input.data.clone());
    let c = g.constant(&[cond.len()], cond.to_vec());
    let y = net.forward(&mut g, store, x, c)?;
    Ok(Tensor::new(g.shape(y), g.value(y).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::{gelu, softplus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![5, 7, 3], Activation::Gelu, OutputActivation::None);
        let mlp = Mlp::new(&mut store, "m", &spec, false, &mut rng()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(mlp_forward(&mlp, &store, &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_relu_layer() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu, OutputActivation::None);
        let mlp = Mlp::new(&mut store, "m", &spec, false, &mut rng()).unwrap();
        for l in &mlp.layers {
            store.get_mut(l.w).data = vec![1.0, 0.0, 0.0, 1.0];
        }
        // relu after the first layer, then identity
        assert_eq!(mlp_forward(&mlp, &store, &[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn mlp_matches_straight_line_evaluation() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![4, 6, 5, 2], Activation::Gelu, OutputActivation::Softplus);
        let mlp = Mlp::new(&mut store, "m", &spec, false, &mut rng()).unwrap();
        let mut r = rng();
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).len();
            store.get_mut(id).data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        }
        let x = [0.3, -0.7, 1.1, 0.05];
        let mut h = x.to_vec();
        for (i, l) in mlp.layers.iter().enumerate() {
            let w = &store.get(l.w).data;
            let b = &store.get(l.b).data;
            let mut o = vec![0.0; l.n_out];
            for r in 0..l.n_out {
                let mut acc = b[r];
                for c in 0..l.n_in {
                    acc += w[r * l.n_in + c] * h[c];
                }
                o[r] = if i + 1 < mlp.layers.len() { gelu(acc) } else { softplus(acc) };
            }
            h = o;
        }
        let got = mlp_forward(&mlp, &store, &x).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(mlp_forward(&mlp, &store, &[1.0]).is_err());
    }

    #[test]
    fn attention_with_zero_values_is_identity() {
        let mut store = ParamStore::new();
        let a = CrossAttention::new(&mut store, "a", 3, 9, 4, &mut rng());
        store.get_mut(a.wv).data.iter_mut().for_each(|x| *x = 0.0);
        let x = Tensor::new(&[3, 2, 2], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect());
        let y = cross_attention_forward(&a, &store, &x, &[0.2; 9]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn singleton_attention_weights_are_one() {
        let mut store = ParamStore::new();
        let a = CrossAttention::new(&mut store, "a", 2, 9, 3, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(&[2, 4, 4], (0..32).map(|i| (i as f64).sin() * 50.0).collect());
        let c = g.constant(&[9], vec![3.0; 9]);
        a.forward(&mut g, &store, x, c).unwrap();
        // the softmax node is the only one whose values are all exactly 1
        let found = (0..g.len()).any(|i| {
            let v = crate::nn::graph::tests_support::value_at(&g, i);
            v.len() == 16 && v.iter().all(|&x| x == 1.0)
        });
        assert!(found);
    }

    #[test]
    fn unet_shapes_and_zero_weights() {
        let mut store = ParamStore::new();
        let spec = UNetSpec { in_channels: 3, base_channels: 4, out_channels: 3, cond_dim: 9, attn_dim: 4 };
        let net = UNet::new(&mut store, "u", &spec, false, &mut rng()).unwrap();
        let x = Tensor::new(&[3, 16, 16], (0..768).map(|i| (i as f64 * 0.01).cos()).collect());
        let y = unet_forward(&net, &store, &x, &[0.1; 9]).unwrap();
        assert_eq!(y.shape, vec![3, 16, 16]);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let y = unet_forward(&net, &store, &x, &[0.1; 9]).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[3, 6, 8]);
        assert!(matches!(unet_forward(&net, &store, &bad, &[0.0; 9]), Err(MucError::InvalidArgument(_))));
    }
}
