use crate::error::{ensure_len, Result};
use crate::nn::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for every tensor of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { lr, beta1: BETA1, beta2: BETA2, eps: EPSILON, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update of every tensor in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        ensure_len("adam parameter groups", self.m.len(), store.len())?;
        ensure_len("adam gradient groups", self.m.len(), grads.len())?;
        for (id, g) in store.ids().zip(grads) {
            ensure_len("adam gradient length", store.get(id).len(), g.len())?;
            ensure_len("adam moment length", self.m[id.index()].len(), g.len())?;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = &mut store.get_mut(id).data;
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
