//! Joint reweighting: per-view joint scores, score-weighted parameter mixing and the
//! distance-distribution KL loss.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{camera_condition_vector, CameraParams, JointDistanceTable};
use crate::error::{ensure_len, MucError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::{Activation, Mlp, MlpSpec, OutputActivation, ParamStore};

pub const CONDITION_DIM: usize = 9;
/// Floor applied to target probabilities before the logarithm.
pub const TARGET_FLOOR: f64 = 1e-12;

/// Synthetic stand-in for the encoder's task and hand tokens of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeature {
    pub task_feature: Vec<f64>,
    pub hand_feature: Vec<f64>,
}

/// Positive per-view scores; rows are cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub body_scores: Vec<Vec<f64>>,
    pub hand_scores: Vec<Vec<f64>>,
    /// Body scores before softplus.
    pub body_logits: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandScoreMode {
    PerJoint,
    PerHand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JrnSpec {
    pub task_dim: usize,
    pub hand_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub hand_mode: HandScoreMode,
}

impl Default for JrnSpec {
    fn default() -> Self {
        JrnSpec { task_dim: 32, hand_dim: 16, hidden: vec![64, 64], activation: Activation::Gelu, hand_mode: HandScoreMode::PerJoint }
    }
}

/// Body and hand scoring heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Jrn {
    pub spec: JrnSpec,
    pub body: Mlp,
    pub hand: Mlp,
    pub hand_joints: usize,
    pub body_joints: usize,
}

/// Graph handles produced by [`Jrn::forward`].
#[derive(Clone, Copy, Debug)]
pub struct JrnOutput {
    /// `[N, 21]` pre-softplus.
    pub body_logits: Var,
    /// `[N, 21]`.
    pub body: Var,
    /// `[N, 2H]`.
    pub hand: Var,
}

impl Jrn {
    /// Heads end in a zero-initialized layer, so every score starts at `softplus(0)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &JrnSpec, body_joints: usize, hand_joints: usize, rng: &mut R) -> Result<Self> {
        let widths = |input: usize, out: usize| {
            let mut w = vec![input + CONDITION_DIM];
            w.extend(&spec.hidden);
            w.push(out);
            MlpSpec::new(w, spec.activation, OutputActivation::Softplus)
        };
        let hand_out = match spec.hand_mode {
            HandScoreMode::PerJoint => hand_joints,
            HandScoreMode::PerHand => 2,
        };
        if hand_joints == 0 || hand_joints % 2 != 0 {
            return Err(MucError::Config(format!("hand joint count {hand_joints} must be positive and even")));
        }
        let body = Mlp::new(store, "jrn.body", &widths(spec.task_dim, body_joints), true, rng)?;
        let hand = Mlp::new(store, "jrn.hand", &widths(spec.hand_dim, hand_out), true, rng)?;
        Ok(Jrn { spec: spec.clone(), body, hand, hand_joints, body_joints })
    }

    fn input(&self, g: &mut Graph, feature: &[f64], camera: &CameraParams, dim: usize, what: &'static str) -> Result<Var> {
        ensure_len(what, dim, feature.len())?;
        let mut x = feature.to_vec();
        x.extend(camera_condition_vector(camera));
        Ok(g.constant(&[x.len()], x))
    }

    /// Records scores for every view, rows in camera order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[ViewFeature], cameras: &[CameraParams]) -> Result<JrnOutput> {
        if features.is_empty() {
            return Err(MucError::InvalidArgument("no views to score".into()));
        }
        ensure_len("cameras per feature", features.len(), cameras.len())?;
        let n = features.len();
        let mut body_rows = Vec::with_capacity(n);
        let mut hand_rows = Vec::with_capacity(n);
        for (f, cam) in features.iter().zip(cameras) {
            let xb = self.input(g, &f.task_feature, cam, self.spec.task_dim, "task feature")?;
            let zb = self.body.forward_logits(g, store, xb)?;
            body_rows.push(g.reshape(zb, &[1, self.body_joints]));
            let xh = self.input(g, &f.hand_feature, cam, self.spec.hand_dim, "hand feature")?;
            let zh = self.hand.forward_logits(g, store, xh)?;
            let zh = match self.spec.hand_mode {
                HandScoreMode::PerJoint => zh,
                HandScoreMode::PerHand => {
                    let h = self.hand_joints / 2;
                    g.gather(zh, Rc::new((0..self.hand_joints).map(|i| i / h).collect()), &[self.hand_joints])
                }
            };
            hand_rows.push(g.reshape(zh, &[1, self.hand_joints]));
        }
        let body_logits = g.concat(&body_rows);
        let body = g.softplus(body_logits);
        let hl = g.concat(&hand_rows);
        let hand = g.softplus(hl);
        Ok(JrnOutput { body_logits, body, hand })
    }
}

fn rows(v: &[f64], n: usize) -> Vec<Vec<f64>> {
    v.chunks(v.len() / n).map(<[f64]>::to_vec).collect()
}

/// Scores for N views.
pub fn jrn_scores(jrn: &Jrn, store: &ParamStore, features: &[ViewFeature], cameras: &[CameraParams]) -> Result<ScoreMatrix> {
    let mut g = Graph::new();
    let out = jrn.forward(&mut g, store, features, cameras)?;
    g.check_finite()?;
    let n = features.len();
    Ok(ScoreMatrix {
        body_scores: rows(g.value(out.body), n),
        hand_scores: rows(g.value(out.hand), n),
        body_logits: rows(g.value(out.body_logits), n),
    })
}

/// Maps each of `groups * 3` axis-angle entries to its group.
pub fn triplet_groups(groups: usize) -> Vec<usize> {
    (0..3 * groups).map(|i| i / 3).collect()
}

fn check_fusion_inputs(param_stack: &[Vec<f64>], scores: &[Vec<f64>], group_map: &[usize]) -> Result<usize> {
    if param_stack.is_empty() {
        return Err(MucError::InvalidArgument("no views to fuse".into()));
    }
    ensure_len("score rows", param_stack.len(), scores.len())?;
    let g = scores[0].len();
    for (p, s) in param_stack.iter().zip(scores) {
        ensure_len("parameters per view", group_map.len(), p.len())?;
        ensure_len("scores per view", g, s.len())?;
        if let Some(bad) = s.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(MucError::InvalidArgument(format!("score {bad} is not strictly positive")));
        }
    }
    if let Some(&bad) = group_map.iter().find(|&&k| k >= g) {
        return Err(MucError::InvalidArgument(format!("group index {bad} out of range for {g} groups")));
    }
    Ok(g)
}

/// Score-weighted mean over views: each parameter uses the normalized scores of its group.
pub fn fuse_weighted(param_stack: &[Vec<f64>], scores: &[Vec<f64>], group_map: &[usize]) -> Result<Vec<f64>> {
    let g = check_fusion_inputs(param_stack, scores, group_map)?;
    let mut total = vec![0.0; g];
    for s in scores {
        for k in 0..g {
            total[k] += s[k];
        }
    }
    let mut out = vec![0.0; group_map.len()];
    for (p, s) in param_stack.iter().zip(scores) {
        for (i, &k) in group_map.iter().enumerate() {
            out[i] += (s[k] / total[k]) * p[i];
        }
    }
    Ok(out)
}

/// Graph form of [`fuse_weighted`]: `params [N, P]`, `scores [N, G]` to `[P]`.
pub fn fuse_weighted_graph(g: &mut Graph, params: Var, scores: Var, group_map: &[usize]) -> Var {
    let (n, groups) = (g.shape(scores)[0], g.shape(scores)[1]);
    let p = group_map.len();
    assert_eq!(g.shape(params), &[n, p]);
    let total = g.sum_rows(scores);
    let total = g.broadcast_rows(total, n);
    let w = g.div(scores, total);
    let idx: Vec<usize> = (0..n).flat_map(|c| group_map.iter().map(move |&k| c * groups + k)).collect();
    let w = g.gather(w, Rc::new(idx), &[n, p]);
    let prod = g.mul(w, params);
    g.sum_rows(prod)
}

/// Per joint, softmax over cameras of `-normalized_depth / tau`; returns `[N][K]`.
pub fn target_distribution(tables: &[JointDistanceTable], temperature: f64) -> Result<Vec<Vec<f64>>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(MucError::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if tables.is_empty() {
        return Err(MucError::InvalidArgument("no distance tables".into()));
    }
    let k = tables[0].normalized.len();
    for t in tables {
        ensure_len("distance table length", k, t.normalized.len())?;
    }
    let n = tables.len();
    let mut q = vec![vec![0.0; k]; n];
    for j in 0..k {
        let z: Vec<f64> = tables.iter().map(|t| -t.normalized[j] / temperature).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..n {
            q[c][j] = e[c] / s;
        }
    }
    Ok(q)
}

fn softmax_columns(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k) = (logits.len(), logits[0].len());
    let mut p = vec![vec![0.0; k]; n];
    for j in 0..k {
        let mx = logits.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logits.iter().map(|r| (r[j] - mx).exp()).sum();
        for c in 0..n {
            p[c][j] = (logits[c][j] - mx).exp() / s;
        }
    }
    p
}

/// Mean over joints of `KL(softmax_c(logits) || target)`.
pub fn kl_from_logits(logits: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if logits.is_empty() {
        return Err(MucError::InvalidArgument("empty score matrix".into()));
    }
    ensure_len("target rows", logits.len(), target.len())?;
    let k = logits[0].len();
    for (l, q) in logits.iter().zip(target) {
        ensure_len("logit columns", k, l.len())?;
        ensure_len("target columns", k, q.len())?;
    }
    let p = softmax_columns(logits);
    let mut total = 0.0;
    for j in 0..k {
        for c in 0..logits.len() {
            let pc = p[c][j];
            if pc > 0.0 {
                total += pc * (pc.ln() - target[c][j].max(TARGET_FLOOR).ln());
            }
        }
    }
    Ok(total / k as f64)
}

/// Joint distance distribution loss on the body scores.
pub fn jrn_loss(scores: &ScoreMatrix, target: &[Vec<f64>]) -> Result<f64> {
    kl_from_logits(&scores.body_logits, target)
}

/// Graph form of the KL loss from `[N, K]` logits.
pub fn jrn_loss_graph(g: &mut Graph, logits: Var, target: &[Vec<f64>]) -> Var {
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    let lt = g.transpose(logits); // [K, N]
    let logp = g.log_softmax_rows(lt);
    let p = g.exp(logp);
    let logq: Vec<f64> = (0..k).flat_map(|j| (0..n).map(move |c| (j, c))).map(|(j, c)| target[c][j].max(TARGET_FLOOR).ln()).collect();
    let logq = g.constant(&[k, n], logq);
    let diff = g.sub(logp, logq);
    let terms = g.mul(p, diff);
    let s = g.sum(terms);
    g.scale(s, 1.0 / k as f64)
}

/// `softplus` inverse, for building score rows from desired positive values in tests.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::normalize_distances;
    use crate::nn::graph::softplus;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(d: &[f64]) -> JointDistanceTable {
        JointDistanceTable { records: d.iter().map(|&x| [0.0, 0.0, x]).collect(), normalized: normalize_distances(d) }
    }

    fn table_norm(n: &[f64]) -> JointDistanceTable {
        JointDistanceTable { records: vec![[0.0; 3]; n.len()], normalized: n.to_vec() }
    }

    fn toy_jrn(mode: HandScoreMode) -> (Jrn, ParamStore) {
        let mut store = ParamStore::new();
        let spec = JrnSpec { hand_mode: mode, ..JrnSpec::default() };
        let jrn = Jrn::new(&mut store, &spec, 21, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (jrn, store)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
        }
    }

    fn feature(seed: f64) -> ViewFeature {
        ViewFeature {
            task_feature: (0..32).map(|i| (i as f64 * 0.3 + seed).sin()).collect(),
            hand_feature: (0..16).map(|i| (i as f64 * 0.7 + seed).cos()).collect(),
        }
    }

    fn cam(x: f64) -> CameraParams {
        CameraParams::look_at(nalgebra::Vector3::new(x, -3.0, 1.0), nalgebra::Vector3::new(0.0, 0.0, 1.0), nalgebra::Vector3::z(), 500.0, [512, 512]).unwrap()
    }

    #[test]
    fn scores_shapes_and_positivity() {
        let (jrn, mut store) = toy_jrn(HandScoreMode::PerJoint);
        let s = jrn_scores(&jrn, &store, &[feature(0.0)], &[cam(0.0)]).unwrap();
        assert_eq!(s.body_scores.len(), 1);
        assert_eq!(s.body_scores[0].len(), 21);
        assert!(s.body_scores[0].iter().all(|&x| x == std::f64::consts::LN_2));
        randomize(&mut store, 9);
        let s = jrn_scores(&jrn, &store, &[feature(0.0), feature(0.0), feature(1.0)], &[cam(0.0), cam(0.0), cam(2.0)]).unwrap();
        assert_eq!(s.body_scores[0], s.body_scores[1]);
        assert_eq!(s.hand_scores[0], s.hand_scores[1]);
        assert_ne!(s.body_scores[0], s.body_scores[2]);
        assert!(s.body_scores.iter().chain(&s.hand_scores).flatten().all(|&x| x > 0.0));
        let bad = ViewFeature { task_feature: vec![0.0; 3], hand_feature: vec![0.0; 16] };
        assert!(jrn_scores(&jrn, &store, &[bad], &[cam(0.0)]).is_err());
    }

    #[test]
    fn per_hand_mode_shares_scores() {
        let (jrn, mut store) = toy_jrn(HandScoreMode::PerHand);
        randomize(&mut store, 2);
        let s = jrn_scores(&jrn, &store, &[feature(0.5)], &[cam(1.0)]).unwrap();
        let h = &s.hand_scores[0];
        assert_eq!(h.len(), 4);
        assert_eq!(h[0], h[1]);
        assert_eq!(h[2], h[3]);
        assert_ne!(h[0], h[2]);
    }

    #[test]
    fn fuse_examples() {
        let p = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(fuse_weighted(&p, &[vec![2.0], vec![2.0]], &[0, 0]).unwrap(), vec![2.0, 3.0]);
        let f = fuse_weighted(&p, &[vec![1.0], vec![3.0]], &[0, 0]).unwrap();
        assert!((f[0] - 2.5).abs() < 1e-15 && (f[1] - 3.5).abs() < 1e-15);
        let f = fuse_weighted(&p, &[vec![1.0], vec![1e-12]], &[0, 0]).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-11 && (f[1] - 2.0).abs() < 1e-11);
        assert!(fuse_weighted(&p, &[vec![1.0], vec![0.0]], &[0, 0]).is_err());
        assert!(fuse_weighted(&p, &[vec![1.0], vec![1.0]], &[0, 1]).is_err());
    }

    #[test]
    fn single_view_fusion_is_exact() {
        let p = vec![vec![0.123456789, -3.3, 1e-7]];
        assert_eq!(fuse_weighted(&p, &[vec![0.37]], &[0, 0, 0]).unwrap(), p[0]);
    }

    #[test]
    fn graph_fusion_matches_plain() {
        let params = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![-0.1, 0.0, 0.9, 1.1, -0.4, 0.2], vec![0.3, 0.3, 0.3, 0.7, 0.7, 0.7]];
        let scores = vec![vec![0.2, 1.5], vec![3.0, 0.1], vec![0.7, 0.7]];
        let map = triplet_groups(2);
        let plain = fuse_weighted(&params, &scores, &map).unwrap();
        let mut g = Graph::new();
        let p = g.constant(&[3, 6], params.concat());
        let s = g.constant(&[3, 2], scores.concat());
        let f = fuse_weighted_graph(&mut g, p, s, &map);
        assert_eq!(g.value(f), &plain[..]);
    }

    #[test]
    fn target_examples() {
        let q = target_distribution(&[table(&[2.0, 5.0, 4.0]), table(&[2.0, 5.0, 4.0])], 0.5).unwrap();
        assert!(q.iter().flatten().all(|&x| x == 0.5));
        let q = target_distribution(&[table_norm(&[0.0]), table_norm(&[1.0])], 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((q[0][0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((q[1][0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((q[0][0] - 0.7311).abs() < 1e-4);
        let q = target_distribution(&[table_norm(&[0.3]), table_norm(&[0.1]), table_norm(&[0.9])], 1e-4).unwrap();
        assert_eq!(q[1][0], 1.0);
        assert!(target_distribution(&[table_norm(&[0.0])], 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let l = vec![vec![0.4, -1.0], vec![0.4, 2.0]];
        let p = softmax_columns(&l);
        assert!(kl_from_logits(&l, &p).unwrap().abs() < 1e-12);
        let v = kl_from_logits(&[vec![0.0], vec![0.0]], &[vec![0.25], vec![0.75]]).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 1e-5);
        // zero target entries are floored, not infinite
        let v = kl_from_logits(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![0.0]]).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn graph_kl_matches_plain_and_gradchecks() {
        let logits = vec![vec![0.3, -0.2, 1.0], vec![-0.7, 0.5, 0.0]];
        let q = target_distribution(&[table_norm(&[0.0, 1.0, 0.2]), table_norm(&[1.0, 0.0, 0.6])], 0.5).unwrap();
        let plain = kl_from_logits(&logits, &q).unwrap();
        let mut g = Graph::new();
        let l = g.constant(&[2, 3], logits.concat());
        let v = jrn_loss_graph(&mut g, l, &q);
        assert!((g.scalar(v) - plain).abs() < 1e-14);

        let (jrn, mut store) = toy_jrn(HandScoreMode::PerJoint);
        randomize(&mut store, 4);
        let feats = [feature(0.1), feature(0.9)];
        let cams = [cam(-1.0), cam(1.5)];
        let target = target_distribution(&[table_norm(&[0.5; 21]), table_norm(&(0..21).map(|i| i as f64 / 20.0).collect::<Vec<_>>())], 0.5).unwrap();
        let r = crate::nn::gradcheck::check_store("jrn", &mut store, 16, None, |g, s| {
            let out = jrn.forward(g, s, &feats, &cams)?;
            Ok(jrn_loss_graph(g, out.body_logits, &target))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-6, 0.3, 1.0, 7.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn fusion_idempotent_and_scale_invariant(
            vals in prop::collection::vec(-3.0f64..3.0, 6),
            scores in prop::collection::vec(1e-3f64..10.0, 8),
            c in 1e-3f64..1e3,
        ) {
            let map = triplet_groups(2);
            let stack = vec![vals.clone(); 4];
            let s: Vec<Vec<f64>> = scores.chunks(2).map(<[f64]>::to_vec).collect();
            let f = fuse_weighted(&stack, &s, &map).unwrap();
            for (a, b) in f.iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let distinct: Vec<Vec<f64>> = (0..4).map(|k| vals.iter().map(|v| v + k as f64).collect()).collect();
            let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
            let f1 = fuse_weighted(&distinct, &s, &map).unwrap();
            let f2 = fuse_weighted(&distinct, &scaled, &map).unwrap();
            for (a, b) in f1.iter().zip(&f2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_shift_invariant(
            l in prop::collection::vec(-5.0f64..5.0, 6),
            t in prop::collection::vec(0.0f64..1.0, 6),
            shift in -10.0f64..10.0,
        ) {
            let logits: Vec<Vec<f64>> = l.chunks(2).map(<[f64]>::to_vec).collect();
            let tables: Vec<JointDistanceTable> = t.chunks(2).map(table_norm).collect();
            let q = target_distribution(&tables, 0.5).unwrap();
            let v = kl_from_logits(&logits, &q).unwrap();
            prop_assert!(v >= -1e-15);
            let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            let p1 = softmax_columns(&logits);
            let p2 = softmax_columns(&shifted);
            for j in 0..2 {
                let a1 = (0..3).max_by(|&a, &b| p1[a][j].total_cmp(&p1[b][j])).unwrap();
                let a2 = (0..3).max_by(|&a, &b| p2[a][j].total_cmp(&p2[b][j])).unwrap();
                prop_assert_eq!(a1, a2);
            }
        }
    }
}
