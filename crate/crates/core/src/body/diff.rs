//! Differentiable joint decoder: shape/expression blendshapes regressed to joints, then posed
//! along the kinematic tree, recorded on an autodiff graph.

use std::rc::Rc;

use crate::body::asset::{BodyModelAsset, BODY_JOINTS, SHAPE_DIM};
use crate::nn::graph::{Graph, Var};

/// Joint-space blendshape tables precomputed from an asset.
#[derive(Clone, Debug)]
pub struct JointModel {
    num_joints: usize,
    parent: Vec<usize>,
    /// `J_reg * template`, flat `[J * 3]`.
    rest_template: Vec<f64>,
    /// `[J * 3, 2 * SHAPE_DIM]`: shape columns then expression columns.
    blend: Vec<f64>,
    /// Pose parameter source per joint: body row or hand row.
    driver: Vec<Option<Driver>>,
}

#[derive(Clone, Copy, Debug)]
enum Driver {
    Body(usize),
    Hand(usize),
}

impl JointModel {
    pub fn new(asset: &BodyModelAsset) -> Self {
        let (nv, nj) = (asset.num_vertices(), asset.num_joints());
        let mut rest_template = vec![0.0; nj * 3];
        let mut blend = vec![0.0; nj * 3 * 2 * SHAPE_DIM];
        for j in 0..nj {
            for v in 0..nv {
                let w = asset.joint_regressor[j * nv + v];
                if w == 0.0 {
                    continue;
                }
                for ax in 0..3 {
                    rest_template[j * 3 + ax] += w * asset.template_vertices[v][ax];
                    for k in 0..SHAPE_DIM {
                        blend[(j * 3 + ax) * 2 * SHAPE_DIM + k] += w * asset.shape_dir(v, ax, k);
                        blend[(j * 3 + ax) * 2 * SHAPE_DIM + SHAPE_DIM + k] += w * asset.expr_dir(v, ax, k);
                    }
                }
            }
        }
        let mut driver = vec![None; nj];
        for row in 0..BODY_JOINTS {
            if let Some(j) = asset.body_joint(row) {
                driver[j] = Some(Driver::Body(row));
            }
        }
        for (i, &j) in asset.hand_joint_ids.iter().enumerate() {
            driver[j as usize] = Some(Driver::Hand(i));
        }
        let parent = asset.parent.iter().map(|&p| p.max(0) as usize).collect();
        JointModel { num_joints: nj, parent, rest_template, blend, driver }
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    /// Posed joints `[J, 3]` from body pose `[21 * 3]`, hand pose `[2H * 3]`, shape and
    /// expression `[10]` each.
    pub fn posed_joints(&self, g: &mut Graph, body: Var, hand: Var, shape: Var, face: Var) -> Var {
        let nj = self.num_joints;
        let coeffs = g.concat(&[shape, face]);
        let coeffs = g.reshape(coeffs, &[2 * SHAPE_DIM, 1]);
        let b = g.constant(&[nj * 3, 2 * SHAPE_DIM], self.blend.clone());
        let offs = g.matmul(b, coeffs);
        let offs = g.reshape(offs, &[nj * 3]);
        let t = g.constant(&[nj * 3], self.rest_template.clone());
        let rest = g.add(t, offs);

        let pick = |g: &mut Graph, src: Var, row: usize, shape: &[usize]| g.gather(src, Rc::new(vec![3 * row, 3 * row + 1, 3 * row + 2]), shape);
        let rest_j: Vec<Var> = (0..nj).map(|j| pick(g, rest, j, &[3, 1])).collect();
        let local: Vec<Option<Var>> = self
            .driver
            .iter()
            .map(|d| {
                d.map(|d| {
                    let aa = match d {
                        Driver::Body(r) => pick(g, body, r, &[3]),
                        Driver::Hand(r) => pick(g, hand, r, &[3]),
                    };
                    g.rodrigues(aa)
                })
            })
            .collect();

        // world rotation, or None while it is still the identity
        let mut world: Vec<Option<Var>> = Vec::with_capacity(nj);
        let mut delta: Vec<Option<Var>> = Vec::with_capacity(nj);
        world.push(local[0]);
        delta.push(None);
        for j in 1..nj {
            let p = self.parent[j];
            let d = match world[p] {
                Some(wp) => {
                    let bone = g.sub(rest_j[j], rest_j[p]);
                    let rb = g.matmul(wp, bone);
                    let moved = g.sub(rb, bone);
                    Some(match delta[p] {
                        Some(dp) => g.add(moved, dp),
                        None => moved,
                    })
                }
                None => delta[p],
            };
            let w = match (world[p], local[j]) {
                (Some(wp), Some(l)) => Some(g.matmul(wp, l)),
                (a, b) => a.or(b),
            };
            world.push(w);
            delta.push(d);
        }
        let rows: Vec<Var> = (0..nj)
            .map(|j| {
                let r = match delta[j] {
                    Some(d) => g.add(rest_j[j], d),
                    None => rest_j[j],
                };
                g.reshape(r, &[1, 3])
            })
            .collect();
        g.concat(&rows)
    }
}
