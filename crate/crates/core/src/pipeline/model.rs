//! The trainable fusion model and its per-scene forward pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::diff::JointModel;
use crate::body::{lbs_forward, make_toy_asset_with, BodyModelAsset, ParamSet, PosedBody, BODY_JOINTS, SHAPE_DIM};
use crate::camera::joint_distance_table;
use crate::error::{MucError, Result};
use crate::jrn::{fuse_weighted_graph, jrn_loss_graph, target_distribution, triplet_groups, Jrn, JrnOutput, JrnSpec};
use crate::losses::{joint2d_graph, param_l1_graph, LossComponents};
use crate::nn::graph::{Graph, Var};
use crate::nn::{load_checkpoint, save_checkpoint, AdamState, ParamStore};
use crate::pipeline::config::{LossConfig, RunConfig};
use crate::srn::{face_uv_rect, fuse_normal_maps_graph, fuse_param_vectors_graph, masked_l1_graph, rasterize_face, rasterize_normals, MapKind, NormalMap, Srn, SrnSpec};
use crate::synth::SceneSample;

/// Which learned weights the fusion uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// JRN for pose, SRN for shape and expression.
    Full,
    /// JRN for pose, arithmetic mean for shape and expression.
    JrnOnly,
    /// Arithmetic mean everywhere.
    Uniform,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::JrnOnly => "jrn_only",
            FusionMode::Uniform => "uniform",
        }
    }
}

pub struct FusionModel {
    pub asset: BodyModelAsset,
    pub joints: JointModel,
    pub jrn: Jrn,
    pub srn: Srn,
    pub store: ParamStore,
    face_rect: [f64; 4],
}

/// Graph handles of one fused scene.
#[derive(Clone, Debug)]
pub struct FusedGraph {
    /// `[21 * 3]`.
    pub body: Var,
    /// `[2H * 3]`.
    pub hand: Var,
    pub shape: Var,
    pub face: Var,
    pub jrn: Option<JrnOutput>,
    /// Fused maps and their union masks, only in [`FusionMode::Full`].
    pub shape_map: Option<(Var, Vec<bool>)>,
    pub face_map: Option<(Var, Vec<bool>)>,
}

/// Per-scene targets that do not depend on the model.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub gt_flat: Vec<f64>,
    pub shape_map: NormalMap,
    pub face_map: NormalMap,
    pub body_target: Vec<Vec<f64>>,
    pub hand_target: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub params: ParamSet,
    pub body: PosedBody,
}

fn rows3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn coeffs(v: &[f64]) -> [f64; SHAPE_DIM] {
    v.try_into().expect("coefficient vector has SHAPE_DIM entries")
}

impl FusionModel {
    pub fn new(asset: BodyModelAsset, jrn_spec: &JrnSpec, srn_spec: &SrnSpec, seed: u64) -> Result<Self> {
        if asset.driven_body_joints().len() != BODY_JOINTS {
            return Err(MucError::Config(format!("asset drives {} body joints, fusion needs {BODY_JOINTS}", asset.driven_body_joints().len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let jrn = Jrn::new(&mut store, jrn_spec, BODY_JOINTS, asset.num_hand_joints(), &mut rng)?;
        let srn = Srn::new(&mut store, srn_spec, &mut rng)?;
        let face_rect = face_uv_rect(&asset)?;
        Ok(FusionModel { joints: JointModel::new(&asset), asset, jrn, srn, store, face_rect })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let asset = make_toy_asset_with(cfg.asset)?;
        Self::new(asset, &cfg.jrn, &cfg.srn, cfg.seed)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<Option<AdamState>> {
        load_checkpoint(path, &mut self.store)
    }

    pub fn save_weights(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        save_checkpoint(path, &self.store, adam)
    }

    /// Shape-resolution normal map and face map of a posed body.
    pub fn surface_maps(&self, body: &PosedBody) -> Result<(NormalMap, NormalMap)> {
        let shape = rasterize_normals(body, &self.asset, self.srn.spec.resolution(MapKind::Shape))?;
        let face = rasterize_face(body, &self.asset, self.face_rect, self.srn.spec.resolution(MapKind::Face))?;
        Ok((shape, face))
    }

    /// Records the fusion of every view of `scene` on `g`.
    pub fn fuse_graph(&self, g: &mut Graph, scene: &SceneSample, mode: FusionMode) -> Result<FusedGraph> {
        self.fuse_graph_with(g, &self.store, scene, mode)
    }

    /// [`Self::fuse_graph`] reading parameters from `store` instead of the model's own.
    pub fn fuse_graph_with(&self, g: &mut Graph, store: &ParamStore, scene: &SceneSample, mode: FusionMode) -> Result<FusedGraph> {
        let n = scene.n_cameras();
        if n == 0 {
            return Err(MucError::InvalidArgument("scene has no views".into()));
        }
        let est: Vec<ParamSet> = scene.view_estimates.iter().map(ParamSet::canonicalized).collect();
        for e in &est {
            e.check_dims(&self.asset)?;
        }
        let nh = self.asset.num_hand_joints();
        let body_stack = g.constant(&[n, 3 * BODY_JOINTS], est.iter().flat_map(|e| e.p_body.concat()).collect());
        let hand_stack = g.constant(&[n, 3 * nh], est.iter().flat_map(|e| e.p_hand.concat()).collect());
        let shape_stack = g.constant(&[n, SHAPE_DIM], est.iter().flat_map(|e| e.p_shape).collect());
        let face_stack = g.constant(&[n, SHAPE_DIM], est.iter().flat_map(|e| e.p_face).collect());

        let (body_s, hand_s, jrn) = match mode {
            FusionMode::Uniform => (g.constant(&[n, BODY_JOINTS], vec![1.0; n * BODY_JOINTS]), g.constant(&[n, nh], vec![1.0; n * nh]), None),
            _ => {
                let o = self.jrn.forward(g, store, &scene.view_features, &scene.cameras)?;
                (o.body, o.hand, Some(o))
            }
        };
        let body = fuse_weighted_graph(g, body_stack, body_s, &triplet_groups(BODY_JOINTS));
        let hand = fuse_weighted_graph(g, hand_stack, hand_s, &triplet_groups(nh));

        if mode != FusionMode::Full {
            let ones: Vec<Var> = (0..n).map(|_| g.constant(&[SHAPE_DIM], vec![1.0; SHAPE_DIM])).collect();
            let shape = fuse_param_vectors_graph(g, shape_stack, &ones);
            let face = fuse_param_vectors_graph(g, face_stack, &ones);
            return Ok(FusedGraph { body, hand, shape, face, jrn, shape_map: None, face_map: None });
        }

        // Each view decodes the fused pose with its own shape and expression.
        let (fb, fh) = (rows3(g.value(body)), rows3(g.value(hand)));
        let mut shape_maps = Vec::with_capacity(n);
        let mut face_maps = Vec::with_capacity(n);
        let (mut ws_map, mut wf_map, mut ws, mut wf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (e, cam) in est.iter().zip(&scene.cameras) {
            let p = ParamSet { p_body: fb.clone(), p_hand: fh.clone(), p_shape: e.p_shape, p_face: e.p_face, p_camera: None };
            let posed = lbs_forward(&self.asset, &p)?;
            let (sm, fm) = self.surface_maps(&posed)?;
            let wsm = self.srn.weight_map(g, store, &sm, cam)?;
            let wfm = self.srn.weight_map(g, store, &fm, cam)?;
            ws.push(self.srn.weight_vector(g, store, MapKind::Shape, wsm)?);
            wf.push(self.srn.weight_vector(g, store, MapKind::Face, wfm)?);
            ws_map.push(wsm);
            wf_map.push(wfm);
            shape_maps.push(sm);
            face_maps.push(fm);
        }
        let shape = fuse_param_vectors_graph(g, shape_stack, &ws);
        let face = fuse_param_vectors_graph(g, face_stack, &wf);
        let shape_map = fuse_normal_maps_graph(g, &shape_maps, &ws_map)?;
        let face_map = fuse_normal_maps_graph(g, &face_maps, &wf_map)?;
        Ok(FusedGraph { body, hand, shape, face, jrn, shape_map: Some(shape_map), face_map: Some(face_map) })
    }

    /// Ground-truth maps, flat parameters and distance targets of a scene.
    pub fn targets(&self, scene: &SceneSample, temperature: f64) -> Result<SceneTargets> {
        let gt_body = lbs_forward(&self.asset, &scene.gt_params)?;
        let (shape_map, face_map) = self.surface_maps(&gt_body)?;
        let driven: Vec<[f64; 3]> = self.asset.driven_body_joints().iter().map(|&j| gt_body.joints[j]).collect();
        let hands: Vec<[f64; 3]> = self.asset.hand_joints().iter().map(|&j| gt_body.joints[j]).collect();
        let body_tables = scene.cameras.iter().map(|c| joint_distance_table(c, &driven)).collect::<Result<Vec<_>>>()?;
        let hand_tables = scene.cameras.iter().map(|c| joint_distance_table(c, &hands)).collect::<Result<Vec<_>>>()?;
        Ok(SceneTargets {
            gt_flat: scene.gt_params.flat_pose_shape(),
            shape_map,
            face_map,
            body_target: target_distribution(&body_tables, temperature)?,
            hand_target: target_distribution(&hand_tables, temperature)?,
        })
    }

    /// Weighted total and the four unweighted components as graph nodes.
    pub fn scene_loss(&self, g: &mut Graph, scene: &SceneSample, targets: &SceneTargets, loss: &LossConfig) -> Result<(Var, [Var; 4])> {
        self.scene_loss_with(g, &self.store, scene, targets, loss)
    }

    pub fn scene_loss_with(&self, g: &mut Graph, store: &ParamStore, scene: &SceneSample, targets: &SceneTargets, loss: &LossConfig) -> Result<(Var, [Var; 4])> {
        let f = self.fuse_graph_with(g, store, scene, FusionMode::Full)?;
        let flat = g.concat(&[f.body, f.hand, f.shape, f.face]);
        let l_smplx = param_l1_graph(g, flat, &targets.gt_flat);

        let joints = self.joints.posed_joints(g, f.body, f.hand, f.shape, f.face);
        let l_joint2d = joint2d_graph(g, joints, &scene.gt_joints2d, &scene.cameras)?;

        let jrn = f.jrn.expect("full fusion runs the JRN");
        let mut l_jrn = jrn_loss_graph(g, jrn.body_logits, &targets.body_target);
        if loss.jrn_on_hands {
            let hl = g.log(jrn.hand);
            let lh = jrn_loss_graph(g, hl, &targets.hand_target);
            let s = g.add(l_jrn, lh);
            l_jrn = g.scale(s, 0.5);
        }

        let (sm, smask) = f.shape_map.expect("full fusion builds maps");
        let (fm, fmask) = f.face_map.expect("full fusion builds maps");
        let ls = masked_l1_graph(g, sm, &smask, &targets.shape_map);
        let lf = masked_l1_graph(g, fm, &fmask, &targets.face_map);
        let both = g.concat(&[ls, lf]);
        let l_surface = g.mean(both);

        let w = loss.weights();
        let parts = [l_smplx, l_joint2d, l_jrn, l_surface];
        let mut total = None;
        for (v, lam) in parts.iter().zip(w.as_array()) {
            if lam == 0.0 {
                continue;
            }
            let t = g.scale(*v, lam);
            total = Some(match total {
                None => t,
                Some(a) => g.add(a, t),
            });
        }
        Ok((total.expect("validated weights are not all zero"), parts))
    }

    /// Fuses the first `k` views and decodes the result.
    pub fn infer(&self, scene: &SceneSample, k: usize, mode: FusionMode) -> Result<FusionOutput> {
        let sub = scene.first_views(k)?;
        let mut g = Graph::new();
        let f = self.fuse_graph(&mut g, &sub, mode)?;
        g.check_finite()?;
        let params = ParamSet {
            p_body: rows3(g.value(f.body)),
            p_hand: rows3(g.value(f.hand)),
            p_shape: coeffs(g.value(f.shape)),
            p_face: coeffs(g.value(f.face)),
            p_camera: None,
        };
        let body = lbs_forward(&self.asset, &params)?;
        Ok(FusionOutput { params, body })
    }
}

pub fn components_of(g: &Graph, parts: &[Var; 4]) -> LossComponents {
    LossComponents { smplx: g.scalar(parts[0]), joint2d: g.scalar(parts[1]), jrn: g.scalar(parts[2]), surface: g.scalar(parts[3]) }
}
