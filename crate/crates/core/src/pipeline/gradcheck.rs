//! Finite-difference checks of every network block and of the end-to-end losses.
//!
//! Rasterized maps are built from values, not graph nodes, so pose parameters reach the SRN
//! inputs without a gradient path. End-to-end blocks therefore probe only the tensors each loss
//! differentiates exactly: every tensor for L_JRN, `srn.*` for the surface-side losses, and
//! `jrn.*` for the pose losses of JRN-only fusion.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body::make_toy_asset_with;
use crate::error::{MucError, Result};
use crate::jrn::{jrn_loss_graph, CONDITION_DIM};
use crate::losses::{joint2d_graph, param_l1_graph};
use crate::nn::gradcheck::{check_store, check_store_where, GradcheckResult};
use crate::nn::graph::{Graph, Var};
use crate::nn::{Activation, Conv2d, CrossAttention, Linear, Mlp, MlpSpec, OutputActivation, ParamStore, UNet, UNetSpec};
use crate::pipeline::config::RunConfig;
use crate::pipeline::model::{FusionMode, FusionModel};
use crate::srn::{MapKind, SrnSpec};
use crate::synth::{sample_scene_with, SceneConfig, Split};

/// Entries probed per tensor.
const PER_TENSOR: usize = 4;

pub const BLOCKS: [&str; 14] = [
    "linear",
    "mlp",
    "conv2d_stride1",
    "conv2d_stride2",
    "cross_attention",
    "unet",
    "srn_reducer",
    "jrn_heads",
    "e2e_jrn",
    "e2e_surface",
    "e2e_smplx_srn",
    "e2e_joint2d_srn",
    "e2e_total_srn",
    "e2e_pose_jrn_only",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<GradcheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(GradcheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| MucError::Format(e.to_string());
        w.write_record(["block", "max_rel_error", "checked", "kinks", "passed"]).map_err(err)?;
        for r in &self.results {
            w.write_record([r.name.clone(), format!("{:e}", r.max_rel_error), r.checked.to_string(), r.kinks.to_string(), r.passed().to_string()])
                .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| MucError::Format(e.to_string()))?).map_err(|e| MucError::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| MucError::io(path, e))
    }
}

/// Adds N(0, sigma) to every entry so zero-initialized heads and biases carry gradient.
fn jitter(store: &mut ParamStore, sigma: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
}

fn input(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, 1.0).unwrap();
    g.constant(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

/// Reproducible input values for a block; each loss evaluation rebuilds the same draw.
fn fixed_input(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
    input(g, shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Squared-sum readout weighted by fixed coefficients, so no entry's gradient cancels.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let c = fixed_input(g, &shape, seed);
    let p = g.mul(y, c);
    let sq = g.mul(p, y);
    let s = g.sum(sq);
    let l = g.sum(p);
    g.add(s, l)
}

fn layer_blocks(seed: u64, corrupt: Option<&'static str>) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 5, 4, false, &mut rng);
    jitter(&mut store, 0.1, &mut rng);
    out.push(check_store("linear", &mut store, PER_TENSOR, corrupt, |g, s| {
        let x = fixed_input(g, &[5], seed ^ 1);
        let y = lin.forward(g, s, x);
        Ok(readout(g, y, seed ^ 2))
    })?);

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &MlpSpec::new(vec![6, 8, 3], Activation::Gelu, OutputActivation::Softplus), true, &mut rng)?;
    jitter(&mut store, 0.1, &mut rng);
    out.push(check_store("mlp", &mut store, PER_TENSOR, corrupt, |g, s| {
        let x = fixed_input(g, &[6], seed ^ 3);
        let y = mlp.forward(g, s, x)?;
        Ok(readout(g, y, seed ^ 4))
    })?);

    for (name, stride) in [("conv2d_stride1", 1), ("conv2d_stride2", 2)] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, name, 2, 3, 3, stride, false, &mut rng);
        jitter(&mut store, 0.1, &mut rng);
        out.push(check_store(name, &mut store, PER_TENSOR, corrupt, |g, s| {
            let x = fixed_input(g, &[2, 6, 6], seed ^ 5);
            let y = conv.forward(g, s, x);
            Ok(readout(g, y, seed ^ 6))
        })?);
    }

    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "cross_attention", 3, CONDITION_DIM, 4, &mut rng);
    jitter(&mut store, 0.1, &mut rng);
    out.push(check_store("cross_attention", &mut store, PER_TENSOR, corrupt, |g, s| {
        let x = fixed_input(g, &[3, 4, 4], seed ^ 7);
        let c = fixed_input(g, &[CONDITION_DIM], seed ^ 8);
        let y = attn.forward(g, s, x, c)?;
        Ok(readout(g, y, seed ^ 9))
    })?);

    let mut store = ParamStore::new();
    let spec = UNetSpec { in_channels: 3, base_channels: 2, out_channels: 3, cond_dim: CONDITION_DIM, attn_dim: 2 };
    let unet = UNet::new(&mut store, "unet", &spec, true, &mut rng)?;
    jitter(&mut store, 0.1, &mut rng);
    out.push(check_store("unet", &mut store, PER_TENSOR, corrupt, |g, s| {
        let x = fixed_input(g, &[3, 8, 8], seed ^ 10);
        let c = fixed_input(g, &[CONDITION_DIM], seed ^ 11);
        let y = unet.forward(g, s, x, c)?;
        Ok(readout(g, y, seed ^ 12))
    })?);
    Ok(out)
}

fn small_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.srn = SrnSpec { shape_res: [8, 8], face_res: [8, 8], base_channels: 2, attn_dim: 2, reducer_hidden: vec![4], ..base.srn.clone() };
    cfg.jrn.hidden = vec![8];
    cfg.data.scene = SceneConfig { n_cameras: 2, ..base.data.scene.clone() };
    cfg.eval.k_list = vec![1, 2];
    cfg
}

/// Runs every block. `corrupt` scales the backward of the named graph op, for negative controls.
pub fn run_gradcheck(base: &RunConfig, corrupt: Option<&'static str>) -> Result<GradcheckReport> {
    let cfg = small_config(base);
    cfg.validate()?;
    let mut results = layer_blocks(cfg.seed, corrupt)?;

    let asset = make_toy_asset_with(cfg.asset)?;
    let mut model = FusionModel::new(asset, &cfg.jrn, &cfg.srn, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    jitter(&mut model.store, 0.1, &mut rng);
    let scene = sample_scene_with(&model.asset, &cfg.data.scene, cfg.seed, Split::Train, "gradcheck".into())?;
    let targets = model.targets(&scene, cfg.loss.temperature)?;
    let mut store = std::mem::take(&mut model.store);
    let is_srn = |n: &str| n.starts_with("srn.");
    let is_jrn = |n: &str| n.starts_with("jrn.");

    let srn_kind = MapKind::Shape;
    let (u, v) = cfg.srn.resolution(srn_kind);
    results.push(check_store_where("srn_reducer", &mut store, PER_TENSOR, corrupt, |n| n.starts_with("srn.shape_reducer"), |g, s| {
        let w = fixed_input(g, &[3, u, v], cfg.seed ^ 13);
        let w = g.softplus(w);
        let y = model.srn.weight_vector(g, s, srn_kind, w)?;
        Ok(readout(g, y, cfg.seed ^ 14))
    })?);

    results.push(check_store_where("jrn_heads", &mut store, PER_TENSOR, corrupt, is_jrn, |g, s| {
        let o = model.jrn.forward(g, s, &scene.view_features, &scene.cameras)?;
        let l = jrn_loss_graph(g, o.body_logits, &targets.body_target);
        let h = readout(g, o.hand, cfg.seed ^ 15);
        Ok(g.add(l, h))
    })?);

    let part = |k: usize| {
        let (model, scene, targets, loss) = (&model, &scene, &targets, &cfg.loss);
        move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let (total, parts) = model.scene_loss_with(g, s, scene, targets, loss)?;
            Ok(if k == 4 { total } else { parts[k] })
        }
    };
    results.push(check_store_where("e2e_jrn", &mut store, PER_TENSOR, corrupt, |_| true, part(2))?);
    results.push(check_store_where("e2e_surface", &mut store, PER_TENSOR, corrupt, is_srn, part(3))?);
    results.push(check_store_where("e2e_smplx_srn", &mut store, PER_TENSOR, corrupt, is_srn, part(0))?);
    results.push(check_store_where("e2e_joint2d_srn", &mut store, PER_TENSOR, corrupt, is_srn, part(1))?);
    results.push(check_store_where("e2e_total_srn", &mut store, PER_TENSOR, corrupt, is_srn, part(4))?);

    results.push(check_store_where("e2e_pose_jrn_only", &mut store, PER_TENSOR, corrupt, is_jrn, |g, s| {
        let f = model.fuse_graph_with(g, s, &scene, FusionMode::JrnOnly)?;
        let flat = g.concat(&[f.body, f.hand, f.shape, f.face]);
        let l1 = param_l1_graph(g, flat, &targets.gt_flat);
        let joints = model.joints.posed_joints(g, f.body, f.hand, f.shape, f.face);
        let l2 = joint2d_graph(g, joints, &scene.gt_joints2d, &scene.cameras)?;
        Ok(g.add(l1, l2))
    })?);
    model.store = store;
    debug_assert_eq!(results.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), BLOCKS);
    Ok(GradcheckReport { results })
}
