//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every op evaluates eagerly and appends a node to the tape; `backward` replays the tape
//! in reverse. Parameters enter through [`Graph::param`], which binds each stored tensor
//! once per graph so gradients from repeated uses accumulate.

use std::rc::Rc;

use crate::body::rotation::{rodrigues, skew};
use crate::error::{MucError, Result};
use crate::nn::params::{ParamId, ParamStore};
use nalgebra::{Matrix3, Vector3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    BroadcastRows(Var),
    Gather(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    AvgPool(Var, usize),
    Rodrigues(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample",
            Op::AvgPool(..) => "avg_pool",
            Op::Rodrigues(..) => "rodrigues",
        }
    }
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// One recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
    backward_done: bool,
    first_nonfinite: Option<String>,
    corrupt_op: Option<&'static str>,
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        if self.first_nonfinite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.first_nonfinite = Some(format!("forward value of node {} ({})", self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Var {
        assert_eq!(numel(shape), value.len(), "constant shape {shape:?} vs {} values", value.len());
        self.push(Op::Leaf, shape.to_vec(), value, false)
    }

    /// Differentiable free input (not backed by a parameter store).
    pub fn variable(&mut self, shape: &[usize], value: Vec<f64>) -> Var {
        assert_eq!(numel(shape), value.len());
        self.push(Op::Leaf, shape.to_vec(), value, true)
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = store.get(id);
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Error if any forward value went non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            Some(m) => Err(MucError::NonFinite(m.clone())),
            None => Ok(()),
        }
    }

    /// Test fixture: scales the gradient flowing out of every op with this name.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op_name: &'static str) {
        self.corrupt_op = Some(op_name);
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b, op.name());
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.value(a).len(), "reshape to {shape:?}");
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Reshape(a), shape.to_vec(), value, rg)
    }

    /// 2-D transpose, expressed as a gather.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose needs a matrix");
        let (m, n) = (s[0], s[1]);
        let idx: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(a, Rc::new(idx), &[n, m])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), vec![1], vec![s], rg)
    }

    /// `[m, n] -> [n]`, summing rows in index order.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumRows(a), vec![n], out, rg)
    }

    /// `[n] -> [m, n]`.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let v = self.value(a);
        let n = v.len();
        let out: Vec<f64> = (0..m).flat_map(|_| v.iter().copied()).collect();
        let rg = self.rg(a);
        self.push(Op::BroadcastRows(a), vec![m, n], out, rg)
    }

    /// `out[i] = a[index[i]]` over flat storage.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), index.len(), "gather shape");
        let v = self.value(a);
        let out = index.iter().map(|&i| v[i]).collect();
        let rg = self.rg(a);
        self.push(Op::Gather(a, index), shape.to_vec(), out, rg)
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing dims");
            lead += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.to_vec()), shape, out, rg)
    }

    fn rows(&self, a: Var) -> (usize, usize) {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "row op needs a matrix");
        (s[0], s[1])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.rows(a);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), vec![m, n], out, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.rows(a);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmaxRows(a), vec![m, n], out, rg)
    }

    /// `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 3 && ws.len() == 4 && ws[1] == xs[0] && ws[2] == ws[3], "conv2d {xs:?} * {ws:?}");
        assert_eq!(self.shape(b), &[ws[0]]);
        let g = ConvGeom::new(&xs, &ws, stride, pad);
        let mut out = vec![0.0; g.o * g.oh * g.ow];
        conv_forward(&g, self.value(x), self.value(w), self.value(b), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, vec![g.o, g.oh, g.ow], out, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let v = self.value(a);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = v[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::Upsample2x(a), vec![c, 2 * h, 2 * w], out, rg)
    }

    /// Non-overlapping `k x k` average pooling of `[C, H, W]`.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % k == 0 && w % k == 0, "avg_pool window {k} on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let v = self.value(a);
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / k) * ow + x / k] += v[(ch * h + y) * w + x] * norm;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::AvgPool(a, k), vec![c, oh, ow], out, rg)
    }

    /// Axis-angle `[3]` to rotation matrix `[3, 3]`.
    pub fn rodrigues(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a), &[3]);
        let v = self.value(a);
        let r = rodrigues([v[0], v[1], v[2]]);
        let out = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
        let rg = self.rg(a);
        self.push(Op::Rodrigues(a), vec![3, 3], out, rg)
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(MucError::Autodiff("backward called twice without reset_grads".into()));
        }
        if self.value(root).len() != 1 {
            return Err(MucError::Autodiff(format!("backward root has shape {:?}, expected a scalar", self.shape(root))));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.corrupt_op == Some(self.nodes[i].op.name()) {
                g.iter_mut().for_each(|x| *x *= 1.1);
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(MucError::NonFinite(format!("gradient of node {i} ({})", self.nodes[i].op.name())));
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after `backward`; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Gradients for every tensor of `store`, zeros for unbound ones.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| match self.bound.get(id.index()).copied().flatten() {
                Some(v) => self.grad(v),
                None => vec![0.0; store.get(id).data.len()],
            })
            .collect()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * vb[k]));
                acc(*b, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] / vb[k]));
                acc(*b, &mut |s| (0..s.len()).for_each(|k| s[k] -= g[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Exp(a) => {
                let out = &node.value;
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * out[k]));
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] / va[k]));
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * 0.5 / out[k]));
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * va[k].signum() * (va[k] != 0.0) as u8 as f64));
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|k| if va[k] > 0.0 { s[k] += g[k] }));
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * gelu_grad(va[k])));
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * sigmoid(va[k])));
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                acc(*a, &mut |s| (0..s.len()).for_each(|k| s[k] += g[k] * out[k] * (1.0 - out[k])));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    // dA = G B^T
                    acc(*a, &mut |s| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut t = 0.0;
                                for j in 0..n {
                                    t += g[i * n + j] * vb[p * n + j];
                                }
                                s[i * k + p] += t;
                            }
                        }
                    });
                }
                if rg(*b) {
                    // dB = A^T G
                    acc(*b, &mut |s| {
                        for i in 0..m {
                            for p in 0..k {
                                let x = va[i * k + p];
                                if x != 0.0 {
                                    for j in 0..n {
                                        s[p * n + j] += x * g[i * n + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumRows(a) => {
                let n = node.value.len();
                acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(k, s)| *s += g[k % n]));
            }
            Op::BroadcastRows(a) => {
                let n = val(*a).len();
                acc(*a, &mut |s| g.iter().enumerate().for_each(|(k, gk)| s[k % n] += gk));
            }
            Op::Gather(a, index) => acc(*a, &mut |s| index.iter().zip(g).for_each(|(&i, gk)| s[i] += gk)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |s| s.iter_mut().zip(&g[off..off + len]).for_each(|(s, g)| *s += g));
                    off += len;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.shape[1];
                let out = &node.value;
                acc(*a, &mut |s| {
                    for (row, (gr, orow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(orow).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            s[row * n + j] += orow[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.shape[1];
                let out = &node.value;
                acc(*a, &mut |s| {
                    for (row, (gr, orow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            s[row * n + j] += gr[j] - orow[j].exp() * total;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = ConvGeom::new(&self.nodes[x.0].shape, &self.nodes[w.0].shape, *stride, *pad);
                let (vx, vw) = (val(*x), val(*w));
                acc(*b, &mut |s| {
                    for o in 0..geom.o {
                        s[o] += g[o * geom.oh * geom.ow..(o + 1) * geom.oh * geom.ow].iter().sum::<f64>();
                    }
                });
                if rg(*w) {
                    acc(*w, &mut |s| conv_backward_weight(&geom, vx, g, s));
                }
                if rg(*x) {
                    acc(*x, &mut |s| conv_backward_input(&geom, vw, g, s));
                }
            }
            Op::Upsample2x(a) => {
                let sh = &self.nodes[a.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                acc(*a, &mut |s| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool(a, k) => {
                let sh = &self.nodes[a.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                acc(*a, &mut |s| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                s[(ch * h + y) * w + xx] += g[(ch * oh + y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Rodrigues(a) => {
                let v = val(*a);
                let d = rodrigues_jacobian([v[0], v[1], v[2]]);
                acc(*a, &mut |s| {
                    for (i, di) in d.iter().enumerate() {
                        s[i] += (0..9).map(|e| g[e] * di[(e / 3, e % 3)]).sum::<f64>();
                    }
                });
            }
        }
    }
}

/// `dR/dv_i` for the exponential map.
pub(crate) fn rodrigues_jacobian(aa: [f64; 3]) -> [Matrix3<f64>; 3] {
    let v = Vector3::from(aa);
    let theta2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-12 {
        // Second-order expansion of I + K + K^2 / 2 around zero.
        let k = skew(&v);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + (ke * k + k * ke) * 0.5
        });
    }
    let r = rodrigues(aa);
    let k = skew(&v);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let vi = v.dot(&e);
        (k * vi + skew(&v.cross(&(i_minus_r * e)))) * r / theta2
    })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    out
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c, h, w, o, k, stride, pad, oh, ow }
    }

    /// Output columns whose input column `ox * stride + kx - pad` is inside the image.
    fn valid_range(&self, kk: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk).div_ceil(self.stride);
        let hi_num = in_len as isize - 1 + self.pad as isize - kk as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num as usize / self.stride + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.c {
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                        let orow = &mut out[o * plane + oy * g.ow..o * plane + (oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            for ox in x0..x1 {
                                orow[ox] += wv * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, x: &[f64], gout: &[f64], gw: &mut [f64]) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        for c in 0..g.c {
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.k {
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    let mut t = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                        let grow = &gout[o * plane + oy * g.ow..o * plane + (oy + 1) * g.ow];
                        for ox in x0..x1 {
                            t += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                    gw[((o * g.c + c) * g.k + ky) * g.k + kx] += t;
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, w: &[f64], gout: &[f64], gx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        for c in 0..g.c {
            for ky in 0..g.k {
                let (y0, y1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, g.ow, g.w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gout[o * plane + oy * g.ow..o * plane + (oy + 1) * g.ow];
                        let xrow = &mut gx[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                        for ox in x0..x1 {
                            xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub fn value_at(g: &super::Graph, i: usize) -> &[f64] {
        &g.nodes[i].value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Vec<f64>, shape: &[usize]) {
        let mut g = Graph::new();
        let x = g.variable(shape, x0.clone());
        let y = build(&mut g, x);
        g.backward(y).unwrap();
        let analytic = g.grad(x);
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xs = x0.clone();
                xs[i] += d;
                let mut g = Graph::new();
                let x = g.variable(shape, xs);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(&[3], vec![1.0, -2.0, 5.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), vec![1.0; 3]);
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![1.0, 2.0]);
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(MucError::Autodiff(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn nonfinite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![-1.0, 2.0]);
        let _ = g.log(x);
        assert!(matches!(g.check_finite(), Err(MucError::NonFinite(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]);
        let s = g.softmax_rows(x);
        for row in g.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single = g.constant(&[4, 1], vec![3.0, -7.0, 1e3, 0.0]);
        let s1 = g.softmax_rows(single);
        assert_eq!(g.value(s1), &[1.0; 4]);
    }

    #[test]
    fn elementwise_gradients() {
        let x0 = vec![0.3, -1.2, 2.0, 0.7];
        fd_check(|g, x| { let y = g.gelu(x); g.sum(y) }, x0.clone(), &[4]);
        fd_check(|g, x| { let y = g.softplus(x); g.sum(y) }, x0.clone(), &[4]);
        fd_check(|g, x| { let y = g.sigmoid(x); let z = g.mul(y, x); g.sum(z) }, x0.clone(), &[4]);
        fd_check(|g, x| { let e = g.exp(x); let l = g.log(e); let q = g.mul(l, e); g.mean(q) }, x0.clone(), &[4]);
        fd_check(|g, x| { let a = g.abs(x); let s = g.add_scalar(a, 1.0); let r = g.sqrt(s); let d = g.div(x, r); g.sum(d) }, x0, &[4]);
    }

    #[test]
    fn matrix_gradients() {
        let x0: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        fd_check(
            |g, x| {
                let w = g.constant(&[3, 2], vec![0.5, -1.0, 2.0, 0.1, 0.3, 0.7]);
                let y = g.matmul(x, w);
                let t = g.transpose(y);
                let ls = g.log_softmax_rows(t);
                let sm = g.softmax_rows(y);
                let a = g.sum(ls);
                let b = g.sum_rows(sm);
                let c = g.broadcast_rows(b, 2);
                let c = g.mul(c, c);
                let c = g.sum(c);
                let t = g.mul(ls, ls);
                let t = g.sum(t);
                let s = g.add(a, c);
                g.add(s, t)
            },
            x0,
            &[2, 3],
        );
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let x0: Vec<f64> = (0..2 * 6 * 6).map(|i| ((i * 7 % 11) as f64 * 0.3).cos()).collect();
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            fd_check(
                move |g, x| {
                    let w = g.constant(&[3, 2, k, k], (0..3 * 2 * k * k).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.2).collect());
                    let b = g.constant(&[3], vec![0.1, -0.2, 0.3]);
                    let y = g.conv2d(x, w, b, stride, pad);
                    let y = g.gelu(y);
                    let y = g.mul(y, y);
                    g.sum(y)
                },
                x0.clone(),
                &[2, 6, 6],
            );
        }
        fd_check(
            |g, x| {
                let p = g.avg_pool(x, 2);
                let u = g.upsample2x(p);
                let u = g.mul(u, x);
                let c = g.concat(&[u, x]);
                let c = g.mul(c, c);
                g.sum(c)
            },
            x0,
            &[2, 6, 6],
        );
    }

    #[test]
    fn conv_weight_and_bias_gradients() {
        let w0: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 3 % 13) as f64 - 6.0) * 0.1).collect();
        fd_check(
            |g, w| {
                let x = g.constant(&[3, 5, 5], (0..75).map(|i| (i as f64 * 0.11).sin()).collect());
                let b = g.constant(&[2], vec![0.0, 0.5]);
                let y = g.conv2d(x, w, b, 2, 1);
                let y = g.mul(y, y);
                g.sum(y)
            },
            w0,
            &[2, 3, 3, 3],
        );
    }

    #[test]
    fn rodrigues_gradient() {
        for aa in [vec![0.3, -0.5, 0.9], vec![1e-8, 2e-8, -1e-8], vec![0.0, 0.0, 0.0], vec![2.9, 0.1, 0.2]] {
            fd_check(
                |g, x| {
                    let r = g.rodrigues(x);
                    let c = g.constant(&[3, 3], vec![0.2, -0.4, 1.0, 0.5, 0.3, -0.7, 0.9, 0.1, 0.6]);
                    let y = g.mul(r, c);
                    let m = g.matmul(r, r);
                    let m = g.mul(m, c);
                    let a = g.sum(y);
                    let b = g.sum(m);
                    g.add(a, b)
                },
                aa,
                &[3],
            );
        }
    }
}
