use nalgebra::{Matrix3, Vector3};

use crate::body::asset::{BodyModelAsset, BODY_JOINTS, SHAPE_DIM};
use crate::body::normals::compute_vertex_normals;
use crate::body::params::ParamSet;
use crate::body::rotation::rodrigues;
use crate::error::Result;

/// Output of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub vertex_normals: Vec<[f64; 3]>,
}

/// Template plus shape and expression blendshapes.
pub fn shaped_vertices(asset: &BodyModelAsset, shape: &[f64; SHAPE_DIM], face: &[f64; SHAPE_DIM]) -> Vec<[f64; 3]> {
    asset
        .template_vertices
        .iter()
        .enumerate()
        .map(|(v, t)| {
            std::array::from_fn(|ax| {
                let mut x = t[ax];
                for k in 0..SHAPE_DIM {
                    x += asset.shape_dir(v, ax, k) * shape[k];
                }
                for k in 0..SHAPE_DIM {
                    x += asset.expr_dir(v, ax, k) * face[k];
                }
                x
            })
        })
        .collect()
}

/// `joint_regressor * vertices`.
pub fn regress_joints(asset: &BodyModelAsset, vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let nv = asset.num_vertices();
    (0..asset.num_joints())
        .map(|j| {
            let row = &asset.joint_regressor[j * nv..(j + 1) * nv];
            let mut acc = [0.0; 3];
            for (w, p) in row.iter().zip(vertices) {
                if *w != 0.0 {
                    for ax in 0..3 {
                        acc[ax] += w * p[ax];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Local joint rotations from the pose parameters; undriven joints stay at identity.
pub fn local_rotations(asset: &BodyModelAsset, params: &ParamSet) -> Vec<Matrix3<f64>> {
    let mut rots = vec![Matrix3::identity(); asset.num_joints()];
    for row in 0..BODY_JOINTS {
        if let Some(j) = asset.body_joint(row) {
            rots[j] = rodrigues(params.p_body[row]);
        }
    }
    for (i, &j) in asset.hand_joint_ids.iter().enumerate() {
        rots[j as usize] = rodrigues(params.p_hand[i]);
    }
    rots
}

/// World rotations and joint displacements (posed minus rest) along the kinematic tree.
///
/// Displacements are accumulated as `(R_parent - I)(J_j - J_parent) + delta_parent` so the
/// zero pose reproduces the rest pose bit for bit.
pub fn forward_kinematics(
    asset: &BodyModelAsset,
    rest_joints: &[[f64; 3]],
    local: &[Matrix3<f64>],
) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    let nj = asset.num_joints();
    let mut world = Vec::with_capacity(nj);
    let mut delta = Vec::with_capacity(nj);
    world.push(local[0]);
    delta.push(Vector3::zeros());
    for j in 1..nj {
        let p = asset.parent[j] as usize;
        let bone = Vector3::from(rest_joints[j]) - Vector3::from(rest_joints[p]);
        let d = (world[p] - Matrix3::identity()) * bone + delta[p];
        world.push(world[p] * local[j]);
        delta.push(d);
    }
    (world, delta)
}

/// Decodes parameters to a posed mesh by blendshapes and linear blend skinning.
pub fn lbs_forward(asset: &BodyModelAsset, params: &ParamSet) -> Result<PosedBody> {
    params.check_dims(asset)?;
    let shaped = shaped_vertices(asset, &params.p_shape, &params.p_face);
    let rest = regress_joints(asset, &shaped);
    let local = local_rotations(asset, params);
    let (world, delta) = forward_kinematics(asset, &rest, &local);
    let nj = asset.num_joints();
    let offsets: Vec<Matrix3<f64>> = world.iter().map(|r| r - Matrix3::identity()).collect();

    let vertices: Vec<[f64; 3]> = shaped
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let pv = Vector3::from(*p);
            let mut disp = Vector3::zeros();
            for j in 0..nj {
                let w = asset.skin_weights[v * nj + j];
                if w != 0.0 {
                    disp += (offsets[j] * (pv - Vector3::from(rest[j])) + delta[j]) * w;
                }
            }
            (pv + disp).into()
        })
        .collect();
    let joints = rest
        .iter()
        .zip(&delta)
        .map(|(r, d)| (Vector3::from(*r) + d).into())
        .collect();
    let vertex_normals = compute_vertex_normals(&vertices, &asset.faces)?.normals;
    Ok(PosedBody {
        vertices,
        joints,
        vertex_normals,
    })
}
