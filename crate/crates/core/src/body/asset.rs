use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MucError, Result};

/// Number of PCA components for shape and expression.
pub const SHAPE_DIM: usize = 10;
/// Rows of `ParamSet::p_body`.
pub const BODY_JOINTS: usize = 21;

/// Parameters of the parametric body decoder.
///
/// Dense arrays are stored flat and row-major: `shape_dirs[(v * 3 + axis) * SHAPE_DIM + k]`,
/// `joint_regressor[j * V + v]`, `skin_weights[v * J + j]`. A `body_joint_ids` entry of `-1`
/// marks a parameter row with no joint to drive (small skeletons).
#[derive(Clone, Debug, PartialEq)]
pub struct BodyModelAsset {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub shape_dirs: Vec<f64>,
    pub expr_dirs: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub parent: Vec<i64>,
    pub skin_weights: Vec<f64>,
    pub uv_coords: Vec<[f64; 2]>,
    pub face_region_vertices: Vec<usize>,
    pub body_joint_ids: Vec<i64>,
    pub hand_joint_ids: Vec<i64>,
}

impl BodyModelAsset {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Hand joints per hand (H).
    pub fn hand_joints_per_hand(&self) -> usize {
        self.hand_joint_ids.len() / 2
    }

    pub fn num_hand_joints(&self) -> usize {
        self.hand_joint_ids.len()
    }

    pub fn shape_dir(&self, v: usize, axis: usize, k: usize) -> f64 {
        self.shape_dirs[(v * 3 + axis) * SHAPE_DIM + k]
    }

    pub fn expr_dir(&self, v: usize, axis: usize, k: usize) -> f64 {
        self.expr_dirs[(v * 3 + axis) * SHAPE_DIM + k]
    }

    /// Joint driving the `row`-th body parameter, if any.
    pub fn body_joint(&self, row: usize) -> Option<usize> {
        usize::try_from(self.body_joint_ids[row]).ok()
    }

    /// Asset joints addressed by body parameter rows, in row order, skipping padding.
    pub fn driven_body_joints(&self) -> Vec<usize> {
        (0..BODY_JOINTS).filter_map(|r| self.body_joint(r)).collect()
    }

    pub fn hand_joints(&self) -> Vec<usize> {
        self.hand_joint_ids.iter().map(|&j| j as usize).collect()
    }

    /// Vertices whose dominant skinning joint is a hand joint.
    pub fn hand_region_vertices(&self) -> Vec<usize> {
        let nj = self.num_joints();
        let hands = self.hand_joints();
        (0..self.num_vertices())
            .filter(|&v| {
                let row = &self.skin_weights[v * nj..(v + 1) * nj];
                let mut best = 0;
                for j in 1..nj {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                hands.contains(&best)
            })
            .collect()
    }

    /// Checks every structural invariant of the asset.
    pub fn validate(&self) -> Result<()> {
        let nv = self.num_vertices();
        let nj = self.num_joints();
        let bad = |m: String| Err(MucError::InvariantViolation(m));
        if nv == 0 || nj == 0 {
            return bad("asset has no vertices or joints".into());
        }
        if self.shape_dirs.len() != nv * 3 * SHAPE_DIM || self.expr_dirs.len() != nv * 3 * SHAPE_DIM {
            return bad("blendshape basis size does not match V x 3 x 10".into());
        }
        if self.joint_regressor.len() != nj * nv || self.skin_weights.len() != nv * nj {
            return bad("regressor or skin weight size mismatch".into());
        }
        if self.uv_coords.len() != nv {
            return bad("uv_coords length differs from vertex count".into());
        }
        if self.body_joint_ids.len() != BODY_JOINTS {
            return bad(format!("body_joint_ids must have {BODY_JOINTS} entries"));
        }
        if self.hand_joint_ids.is_empty() || self.hand_joint_ids.len() % 2 != 0 {
            return bad("hand_joint_ids must hold 2H entries with H >= 1".into());
        }
        let all_finite = self
            .template_vertices
            .iter()
            .flatten()
            .chain(&self.shape_dirs)
            .chain(&self.expr_dirs)
            .chain(&self.joint_regressor)
            .chain(&self.skin_weights)
            .chain(self.uv_coords.iter().flatten())
            .all(|x| x.is_finite());
        if !all_finite {
            return bad("non-finite entry in asset arrays".into());
        }
        for v in 0..nv {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < 0.0) {
                return bad(format!("negative skin weight at vertex {v}"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("skin weights of vertex {v} sum to {s}"));
            }
        }
        for j in 0..nj {
            let s: f64 = self.joint_regressor[j * nv..(j + 1) * nv].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("joint regressor row {j} sums to {s}"));
            }
        }
        if self.parent[0] != -1 {
            return bad("parent[0] must be -1".into());
        }
        for j in 1..nj {
            let p = self.parent[j];
            if p < 0 || p as usize >= j {
                return bad(format!("parent[{j}] = {p} does not precede joint {j}"));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= nv)) {
            return bad(format!("face {f:?} indexes past vertex count {nv}"));
        }
        if self
            .uv_coords
            .iter()
            .flatten()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return bad("uv coordinate outside [0,1]".into());
        }
        if self.face_region_vertices.iter().any(|&v| v >= nv) {
            return bad("face region vertex out of range".into());
        }
        let mut seen = vec![false; nj];
        for &id in self.body_joint_ids.iter().chain(&self.hand_joint_ids) {
            if id == -1 {
                continue;
            }
            if id < 0 || id as usize >= nj {
                return bad(format!("joint id {id} out of range"));
            }
            if std::mem::replace(&mut seen[id as usize], true) {
                return bad(format!("joint id {id} assigned twice"));
            }
        }
        if self.hand_joint_ids.iter().any(|&id| id < 0) {
            return bad("hand joint ids cannot be padding".into());
        }
        Ok(())
    }
}

/// Options for [`make_toy_asset_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyAssetConfig {
    pub num_vertices: usize,
    pub num_joints: usize,
    /// Hand joints per hand; `None` picks 2 when the skeleton allows it.
    #[serde(default)]
    pub hand_joints_per_hand: Option<usize>,
    pub seed: u64,
}

/// Deterministic tube-and-limbs humanoid with `hand_joints_per_hand` defaulted.
pub fn make_toy_asset(num_vertices: usize, num_joints: usize, seed: u64) -> Result<BodyModelAsset> {
    make_toy_asset_with(ToyAssetConfig {
        num_vertices,
        num_joints,
        hand_joints_per_hand: None,
        seed,
    })
}

struct SkeletonJoint {
    parent: i64,
    rest: [f64; 3],
    radius: f64,
}

// z up, -y facing forward, left side at +x.
const BODY_SKELETON: [(i64, [f64; 3], f64); BODY_JOINTS] = [
    (-1, [0.0, 0.0, 0.0], 0.12),      // pelvis
    (0, [0.0, 0.0, 0.18], 0.13),      // spine1
    (1, [0.0, 0.0, 0.40], 0.13),      // spine2
    (2, [0.0, 0.0, 0.58], 0.06),      // neck
    (3, [0.0, -0.02, 0.80], 0.10),    // head
    (0, [0.10, 0.0, -0.06], 0.08),    // left hip
    (5, [0.11, 0.0, -0.48], 0.065),   // left knee
    (6, [0.11, 0.02, -0.88], 0.05),   // left ankle
    (7, [0.11, -0.13, -0.93], 0.04),  // left foot
    (0, [-0.10, 0.0, -0.06], 0.08),   // right hip
    (9, [-0.11, 0.0, -0.48], 0.065),  // right knee
    (10, [-0.11, 0.02, -0.88], 0.05), // right ankle
    (11, [-0.11, -0.13, -0.93], 0.04),// right foot
    (2, [0.07, 0.0, 0.52], 0.06),     // left collar
    (13, [0.19, 0.0, 0.52], 0.055),   // left shoulder
    (14, [0.45, 0.0, 0.52], 0.045),   // left elbow
    (15, [0.70, 0.0, 0.52], 0.035),   // left wrist
    (2, [-0.07, 0.0, 0.52], 0.06),    // right collar
    (17, [-0.19, 0.0, 0.52], 0.055),  // right shoulder
    (18, [-0.45, 0.0, 0.52], 0.045),  // right elbow
    (19, [-0.70, 0.0, 0.52], 0.035),  // right wrist
];

const HEAD: usize = 4;
const LEFT_WRIST: usize = 16;
const RIGHT_WRIST: usize = 20;

// Tubes are allotted in this order when vertices run short; head first so a face region
// always exists.
const BONE_PRIORITY: [usize; 20] = [4, 1, 2, 3, 6, 10, 15, 19, 7, 11, 16, 20, 14, 18, 5, 9, 13, 17, 8, 12];

fn build_skeleton(num_joints: usize, hands_per: usize) -> Result<(Vec<SkeletonJoint>, usize)> {
    if num_joints < 4 {
        return Err(MucError::InvalidAsset(format!("num_joints = {num_joints} < 4")));
    }
    if hands_per == 0 || num_joints < 2 * hands_per + 2 {
        return Err(MucError::InvalidAsset(format!(
            "{num_joints} joints cannot hold disjoint body and hand joint lists with H = {hands_per}"
        )));
    }
    let n_body = num_joints - 2 * hands_per;
    let mut joints: Vec<SkeletonJoint> = BODY_SKELETON
        .iter()
        .take(n_body)
        .map(|&(parent, rest, radius)| SkeletonJoint { parent, rest, radius })
        .collect();
    // Undriven joints past the 21 parameter rows extend upward from the last joint.
    while joints.len() < n_body {
        let last = joints.len() - 1;
        let r = joints[last].rest;
        joints.push(SkeletonJoint {
            parent: last as i64,
            rest: [r[0], r[1], r[2] + 0.05],
            radius: 0.03,
        });
    }
    let n_drivable = n_body.min(BODY_JOINTS);
    for (wrist, side) in [(LEFT_WRIST, 1.0), (RIGHT_WRIST, -1.0)] {
        let mut attach = if wrist < n_drivable { wrist } else { n_drivable - 1 };
        for _ in 0..hands_per {
            let base = joints[attach].rest;
            joints.push(SkeletonJoint {
                parent: attach as i64,
                rest: [base[0] + side * 0.06, base[1], base[2]],
                radius: 0.022,
            });
            attach = joints.len() - 1;
        }
    }
    Ok((joints, n_body))
}

struct Tube {
    from: usize,
    to: usize,
    rows: usize,
    first_vertex: usize,
}

/// Builds a tube-and-limbs humanoid: one open cylinder per bone, laid out in a UV atlas.
pub fn make_toy_asset_with(cfg: ToyAssetConfig) -> Result<BodyModelAsset> {
    let nv = cfg.num_vertices;
    if nv < 8 {
        return Err(MucError::InvalidAsset(format!("num_vertices = {nv} < 8")));
    }
    let hands_per = match cfg.hand_joints_per_hand {
        Some(h) => h,
        None => 2.min(cfg.num_joints.saturating_sub(2) / 2).max(1),
    };
    let (skeleton, n_body) = build_skeleton(cfg.num_joints, hands_per)?;
    let nj = skeleton.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Bone list in priority order; each bone is named by its child joint.
    let mut bones: Vec<usize> = BONE_PRIORITY.iter().copied().filter(|&j| j < n_body.min(BODY_JOINTS)).collect();
    bones.extend((n_body..nj).chain(BODY_JOINTS..n_body));

    let segments = match nv {
        0..300 => 3,
        300..600 => 4,
        600..2000 => 6,
        _ => 8,
    };
    let cols = segments + 1;
    let n_tubes = (nv / (2 * cols)).clamp(1, bones.len());
    let mut rows = vec![2usize; n_tubes];
    let mut remaining = nv - (2 * cols * n_tubes).min(nv);
    if 2 * cols * n_tubes > nv {
        // Only reachable for the smallest meshes: shrink to a single tube.
        return Err(MucError::InvalidAsset(format!("cannot fit a tube into {nv} vertices")));
    }
    let mut k = 0;
    while remaining >= cols {
        rows[k % n_tubes] += 1;
        remaining -= cols;
        k += 1;
    }

    let grid = (n_tubes as f64).sqrt().ceil() as usize;
    let cell = 1.0 / grid as f64;
    let margin = 0.08;

    let mut template = Vec::with_capacity(nv);
    let mut uv = Vec::with_capacity(nv);
    let mut faces = Vec::new();
    let mut tubes = Vec::with_capacity(n_tubes);
    // (tube index, row t, radial direction, axis direction) per vertex, for blendshapes and skinning.
    let mut frames: Vec<(usize, f64, Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(nv);

    for (ti, &child) in bones.iter().take(n_tubes).enumerate() {
        let parent = skeleton[child].parent as usize;
        let a = Vector3::from(skeleton[parent].rest);
        let b = Vector3::from(skeleton[child].rest);
        let axis = (b - a).normalize();
        let helper = if axis.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let n1 = axis.cross(&helper).normalize();
        let n2 = axis.cross(&n1);
        let radius = skeleton[child].radius;
        let nrows = rows[ti];
        let first_vertex = template.len();
        let (cu, cv) = ((ti % grid) as f64 * cell, (ti / grid) as f64 * cell);
        for r in 0..nrows {
            let t = r as f64 / (nrows - 1) as f64;
            for c in 0..cols {
                let phi = std::f64::consts::TAU * (c % segments) as f64 / segments as f64;
                let radial = n1 * phi.cos() + n2 * phi.sin();
                let p = a + (b - a) * t + radial * radius;
                template.push([p.x, p.y, p.z]);
                uv.push([
                    cu + cell * (margin + (1.0 - 2.0 * margin) * c as f64 / segments as f64),
                    cv + cell * (margin + (1.0 - 2.0 * margin) * t),
                ]);
                frames.push((ti, t, radial, axis));
            }
        }
        for r in 0..nrows - 1 {
            for c in 0..segments {
                let i00 = first_vertex + r * cols + c;
                let i01 = i00 + 1;
                let i10 = i00 + cols;
                let i11 = i10 + 1;
                faces.push([i00, i01, i10]);
                faces.push([i01, i11, i10]);
            }
        }
        tubes.push(Tube { from: parent, to: child, rows: nrows, first_vertex });
    }

    // Leftover vertices become small fins on tube end rings so every vertex has a face.
    let mut fin_sources: Vec<usize> = Vec::with_capacity(remaining);
    for f in 0..remaining {
        let tube = &tubes[f % n_tubes];
        let seg = (f / n_tubes) % segments;
        let last_row = (f / (n_tubes * segments)) % 2 == 0;
        let row = if last_row { tube.rows - 1 } else { 0 };
        let i0 = tube.first_vertex + row * cols + seg;
        let i1 = i0 + 1;
        let (p0, p1) = (Vector3::from(template[i0]), Vector3::from(template[i1]));
        let (_, _, radial, axis) = frames[i0];
        let outward = if last_row { axis } else { -axis };
        let p = (p0 + p1) * 0.5 + outward * 0.01;
        let shift = if last_row { 0.5 } else { -0.5 } * margin * cell;
        let (uv0, uv1) = (uv[i0], uv[i1]);
        let idx = template.len();
        template.push([p.x, p.y, p.z]);
        uv.push([0.5 * (uv0[0] + uv1[0]), (0.5 * (uv0[1] + uv1[1]) + shift).clamp(0.0, 1.0)]);
        frames.push((frames[i0].0, frames[i0].1, radial, axis));
        faces.push(if last_row { [i0, i1, idx] } else { [i1, i0, idx] });
        fin_sources.push(i0);
    }
    debug_assert_eq!(template.len(), nv);

    // Skinning: bound to the bone's parent joint, blended toward neighbours near the ends.
    let mut skin = vec![0.0; nv * nj];
    for (v, &(ti, t, _, _)) in frames.iter().enumerate() {
        let tube = &tubes[ti];
        let grand = skeleton[tube.from].parent;
        let w_prev = if grand >= 0 { 0.5 * ((0.25 - t).max(0.0) / 0.25) } else { 0.0 };
        let w_next = 0.5 * ((t - 0.75).max(0.0) / 0.25);
        let row = &mut skin[v * nj..(v + 1) * nj];
        row[tube.from] += 1.0 - w_prev - w_next;
        if grand >= 0 {
            row[grand as usize] += w_prev;
        }
        row[tube.to] += w_next;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }

    // Regressor: uniform over ring vertices sitting on each joint; ring centroids are the joint.
    let mut regressor = vec![0.0; nj * nv];
    for j in 0..nj {
        let mut members = Vec::new();
        for tube in &tubes {
            let row = if tube.to == j {
                Some(tube.rows - 1)
            } else if tube.from == j {
                Some(0)
            } else {
                None
            };
            if let Some(r) = row {
                members.extend((0..segments).map(|c| tube.first_vertex + r * cols + c));
            }
        }
        let reg = &mut regressor[j * nv..(j + 1) * nv];
        if members.is_empty() {
            let target = Vector3::from(skeleton[j].rest);
            let mut by_dist: Vec<(f64, usize)> = template
                .iter()
                .enumerate()
                .map(|(i, p)| ((Vector3::from(*p) - target).norm(), i))
                .collect();
            by_dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            for &(d, i) in by_dist.iter().take(4) {
                reg[i] = 1.0 / (d + 1e-3);
            }
        } else {
            for &m in &members {
                reg[m] += 1.0;
            }
        }
        let s: f64 = reg.iter().sum();
        reg.iter_mut().for_each(|w| *w /= s);
    }

    // Shape basis: per-tube girth and length changes. Expression basis: head vertices only.
    let mut shape_dirs = vec![0.0; nv * 3 * SHAPE_DIM];
    let mut expr_dirs = vec![0.0; nv * 3 * SHAPE_DIM];
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let tube_coeffs: Vec<[(f64, f64); SHAPE_DIM]> = (0..n_tubes)
        .map(|_| std::array::from_fn(|_| (0.012 * gauss(), 0.01 * gauss())))
        .collect();
    let head_tube = tubes.iter().position(|t| t.to == HEAD).unwrap_or(0);
    let face_region: Vec<usize> = (0..nv).filter(|&v| frames[v].0 == head_tube).collect();
    let expr_coeffs: Vec<[f64; SHAPE_DIM]> = (0..tubes[head_tube].rows * segments)
        .map(|_| std::array::from_fn(|_| 0.006 * gauss()))
        .collect();
    for v in 0..nv {
        let (ti, t, radial, axis) = frames[v];
        let src = if v >= nv - fin_sources.len() { fin_sources[v - (nv - fin_sources.len())] } else { v };
        for k in 0..SHAPE_DIM {
            let (girth, stretch) = tube_coeffs[ti][k];
            let d = radial * girth + axis * (stretch * t);
            for ax in 0..3 {
                shape_dirs[(v * 3 + ax) * SHAPE_DIM + k] = d[ax];
            }
            if ti == head_tube {
                let local = src - tubes[ti].first_vertex;
                let key = (local / cols) * segments + (local % cols) % segments;
                let e = radial * expr_coeffs[key][k];
                for ax in 0..3 {
                    expr_dirs[(v * 3 + ax) * SHAPE_DIM + k] = e[ax];
                }
            }
        }
    }

    let mut body_joint_ids = vec![-1i64; BODY_JOINTS];
    for (r, id) in body_joint_ids.iter_mut().enumerate().take(n_body.min(BODY_JOINTS)) {
        *id = r as i64;
    }
    let hand_joint_ids: Vec<i64> = (n_body..nj).map(|j| j as i64).collect();

    let asset = BodyModelAsset {
        template_vertices: template,
        faces,
        shape_dirs,
        expr_dirs,
        joint_regressor: regressor,
        parent: skeleton.iter().map(|j| j.parent).collect(),
        skin_weights: skin,
        uv_coords: uv,
        face_region_vertices: face_region,
        body_joint_ids,
        hand_joint_ids,
    };
    asset.validate()?;
    Ok(asset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_asset_is_valid() {
        let a = make_toy_asset(200, 25, 7).unwrap();
        assert_eq!(a.num_vertices(), 200);
        assert_eq!(a.num_joints(), 25);
        assert_eq!(a.hand_joints_per_hand(), 2);
        assert!(!a.face_region_vertices.is_empty());
        assert!(!a.hand_region_vertices().is_empty());
        assert_eq!(a.driven_body_joints().len(), BODY_JOINTS);
    }

    #[test]
    fn odd_vertex_counts_are_hit_exactly() {
        for nv in [8, 9, 11, 15, 31, 64, 97, 200, 333, 1001] {
            let a = make_toy_asset(nv, 25, 3).unwrap();
            assert_eq!(a.num_vertices(), nv);
            let mut used = vec![false; nv];
            a.faces.iter().flatten().for_each(|&i| used[i] = true);
            assert!(used.iter().all(|&u| u), "orphan vertex at nv = {nv}");
        }
    }

    #[test]
    fn small_skeletons_pad_body_ids() {
        let a = make_toy_asset(64, 4, 1).unwrap();
        assert_eq!(a.hand_joints_per_hand(), 1);
        assert_eq!(a.body_joint_ids.iter().filter(|&&i| i >= 0).count(), 2);
        let big = make_toy_asset(200, 30, 1).unwrap();
        assert_eq!(big.num_joints(), 30);
    }

    #[test]
    fn rejects_overlapping_joint_lists() {
        let err = make_toy_asset_with(ToyAssetConfig {
            num_vertices: 64,
            num_joints: 5,
            hand_joints_per_hand: Some(2),
            seed: 0,
        });
        assert!(matches!(err, Err(MucError::InvalidAsset(_))));
        assert!(make_toy_asset(7, 25, 0).is_err());
    }

    #[test]
    fn tube_normals_point_outward() {
        let a = make_toy_asset(200, 25, 0).unwrap();
        let n = crate::body::compute_vertex_normals(&a.template_vertices, &a.faces).unwrap();
        let nv = a.num_vertices();
        let joints: Vec<Vector3<f64>> = (0..a.num_joints())
            .map(|j| {
                (0..nv).fold(Vector3::zeros(), |acc, v| {
                    acc + Vector3::from(a.template_vertices[v]) * a.joint_regressor[j * nv + v]
                })
            })
            .collect();
        let mut outward = 0;
        for v in 0..nv {
            let p = Vector3::from(a.template_vertices[v]);
            let closest = (1..a.num_joints())
                .map(|j| {
                    let (s, e) = (joints[a.parent[j] as usize], joints[j]);
                    let t = ((p - s).dot(&(e - s)) / (e - s).norm_squared()).clamp(0.0, 1.0);
                    s + (e - s) * t
                })
                .min_by(|x, y| (p - x).norm().total_cmp(&(p - y).norm()))
                .unwrap();
            if Vector3::from(n.normals[v]).dot(&(p - closest)) > 0.0 {
                outward += 1;
            }
        }
        assert!(outward as f64 >= 0.9 * nv as f64, "{outward} of {nv} outward");
    }
}
