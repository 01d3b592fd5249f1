//! Training losses: parameter L1, projected 2D landmark L1, joint-distance KL and surface L1.

use serde::{Deserialize, Serialize};

use crate::body::ParamSet;
use crate::camera::{project_points, CameraParams};
use crate::error::{ensure_len, MucError, Result};
use crate::nn::graph::{Graph, Var};
use crate::srn::{masked_l1, NormalMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub smplx: f64,
    pub joint2d: f64,
    pub jrn: f64,
    pub surface: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { smplx: 1.0, joint2d: 1.0, jrn: 1.0, surface: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.smplx, self.joint2d, self.jrn, self.surface]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MucError::Config(format!("loss weights {w:?} must be finite and nonnegative")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(MucError::Config("at least one loss weight must be nonzero".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one scene or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub smplx: f64,
    pub joint2d: f64,
    pub jrn: f64,
    pub surface: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.smplx, self.joint2d, self.jrn, self.surface]
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.as_array().iter().zip(w.as_array()).map(|(a, b)| a * b).sum()
}

/// Mean absolute difference over pose, shape and expression entries.
pub fn param_l1_loss(pred: &ParamSet, gt: &ParamSet) -> Result<f64> {
    ensure_len("body rows", gt.p_body.len(), pred.p_body.len())?;
    ensure_len("hand rows", gt.p_hand.len(), pred.p_hand.len())?;
    let (a, b) = (pred.flat_pose_shape(), gt.flat_pose_shape());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Graph form: `pred` is the flat `[P]` node in [`ParamSet::flat_pose_shape`] order.
pub fn param_l1_graph(g: &mut Graph, pred: Var, gt: &[f64]) -> Var {
    let t = g.constant(&[gt.len()], gt.to_vec());
    let d = g.sub(pred, t);
    let d = g.abs(d);
    g.mean(d)
}

/// Mean L1 between projected joints and 2D landmarks, averaged over views.
pub fn joint2d_loss(pred_joints: &[[f64; 3]], gt_joints2d: &[Vec<[f64; 2]>], cameras: &[CameraParams]) -> Result<f64> {
    if cameras.is_empty() {
        return Err(MucError::InvalidArgument("no views for the 2D loss".into()));
    }
    ensure_len("2D landmark sets", cameras.len(), gt_joints2d.len())?;
    let mut total = 0.0;
    for (cam, gt) in cameras.iter().zip(gt_joints2d) {
        ensure_len("2D landmarks", pred_joints.len(), gt.len())?;
        let uv = project_points(cam, pred_joints)?;
        let s: f64 = uv.iter().zip(gt).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum();
        total += s / (2 * gt.len()) as f64;
    }
    Ok(total / cameras.len() as f64)
}

/// Pinhole projection of `[K, 3]` joints to `[2, K]` pixel rows.
pub fn project_graph(g: &mut Graph, joints: Var, cam: &CameraParams) -> Var {
    let k = g.shape(joints)[0];
    let r = g.constant(&[3, 3], cam.rotation.concat());
    let jt = g.transpose(joints);
    let xc = g.matmul(r, jt);
    let t = g.constant(&[3, k], (0..3).flat_map(|ax| std::iter::repeat_n(cam.translation[ax], k)).collect());
    let xc = g.add(xc, t);
    let row = |g: &mut Graph, i: usize| g.gather(xc, std::rc::Rc::new((i * k..(i + 1) * k).collect()), &[1, k]);
    let (x, y, z) = (row(g, 0), row(g, 1), row(g, 2));
    let u = g.div(x, z);
    let u = g.scale(u, cam.focal[0]);
    let u = g.add_scalar(u, cam.principal[0]);
    let v = g.div(y, z);
    let v = g.scale(v, cam.focal[1]);
    let v = g.add_scalar(v, cam.principal[1]);
    g.concat(&[u, v])
}

/// Graph form of [`joint2d_loss`]; depth is checked on the forward values.
pub fn joint2d_graph(g: &mut Graph, joints: Var, gt_joints2d: &[Vec<[f64; 2]>], cameras: &[CameraParams]) -> Result<Var> {
    let k = g.shape(joints)[0];
    let pts: Vec<[f64; 3]> = g.value(joints).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut terms = Vec::with_capacity(cameras.len());
    for (cam, gt) in cameras.iter().zip(gt_joints2d) {
        ensure_len("2D landmarks", k, gt.len())?;
        project_points(cam, &pts)?;
        let uv = project_graph(g, joints, cam);
        let target: Vec<f64> = (0..2).flat_map(|ax| gt.iter().map(move |p| p[ax])).collect();
        let target = g.constant(&[2, k], target);
        let d = g.sub(uv, target);
        let d = g.abs(d);
        terms.push(g.mean(d));
    }
    if terms.is_empty() {
        return Err(MucError::InvalidArgument("no views for the 2D loss".into()));
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}

/// Surface L1 and whether the two maps overlapped at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceLoss {
    pub value: f64,
    pub overlap: bool,
}

pub fn surface_loss(fused: &NormalMap, gt: &NormalMap) -> Result<SurfaceLoss> {
    Ok(match masked_l1(fused, gt)? {
        Some(value) => SurfaceLoss { value, overlap: true },
        None => SurfaceLoss { value: 0.0, overlap: false },
    })
}
