//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Name of the tensor and flat index holding the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries skipped because the loss has a kink there.
    pub kinks: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floor(a, b, 1e-6)
}

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `f0`: gradients smaller than this are compared
/// at the absolute level of central-difference cancellation noise, `eps * |f0| / h`.
pub fn roundoff_floor(f0: f64) -> f64 {
    (f64::EPSILON * f0.abs() / FD_STEP / TOLERANCE).max(1e-6)
}

/// Compares analytic and numeric gradients of `loss` w.r.t. every tensor in `store`.
///
/// At most `per_tensor` evenly spaced entries are probed per tensor. An entry whose forward
/// and backward one-sided slopes disagree by more than 1e-3 relative sits on a kink of a
/// piecewise op and is skipped. Relative errors use [`roundoff_floor`]. `corrupt` names an op whose backward is deliberately scaled.
pub fn check_store<F>(name: &str, store: &mut ParamStore, per_tensor: usize, corrupt: Option<&'static str>, loss: F) -> Result<GradcheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_store_where(name, store, per_tensor, corrupt, |_| true, loss)
}

/// [`check_store`] probing only tensors whose name passes `probe`.
pub fn check_store_where<F, P>(name: &str, store: &mut ParamStore, per_tensor: usize, corrupt: Option<&'static str>, probe: P, loss: F) -> Result<GradcheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let mut g = Graph::new();
    if let Some(op) = corrupt {
        g.corrupt_backward(op);
    }
    let root = loss(&mut g, store)?;
    g.check_finite()?;
    let f0 = g.scalar(root);
    let floor = roundoff_floor(f0);
    g.backward(root)?;
    let analytic = g.param_grads(store);
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(&mut g, store)?;
        Ok(g.scalar(r))
    };
    let mut res = GradcheckResult { name: name.to_string(), max_rel_error: 0.0, worst: None, checked: 0, kinks: 0 };
    for id in store.ids().filter(|&id| probe(store.name(id))).collect::<Vec<_>>() {
        let n = store.get(id).len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let x0 = store.get(id).data[k];
            store.get_mut(id).data[k] = x0 + FD_STEP;
            let fp = eval(store)?;
            store.get_mut(id).data[k] = x0 - FD_STEP;
            let fm = eval(store)?;
            store.get_mut(id).data[k] = x0;
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-6) {
                res.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = relative_error_floor(analytic[id.index()][k], numeric, floor);
            res.checked += 1;
            if e > res.max_rel_error || res.worst.is_none() {
                res.max_rel_error = e;
                res.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(res)
}
