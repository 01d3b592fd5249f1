use crate::body::asset::{BodyModelAsset, BODY_JOINTS, SHAPE_DIM};
use crate::body::rotation::canonicalize_axis_angle;
use crate::camera::CameraParams;
use crate::error::{MucError, Result};

/// Pose, shape, expression and camera parameters for one view, or the fused result.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    /// Axis-angle per body parameter row (21 rows).
    pub p_body: Vec<[f64; 3]>,
    /// Axis-angle per hand joint (2H rows, left hand first).
    pub p_hand: Vec<[f64; 3]>,
    pub p_shape: [f64; SHAPE_DIM],
    pub p_face: [f64; SHAPE_DIM],
    /// Camera of the view this estimate came from; `None` for ground truth and fused sets.
    pub p_camera: Option<CameraParams>,
}

impl ParamSet {
    pub fn zeros(hand_joints: usize) -> Self {
        ParamSet {
            p_body: vec![[0.0; 3]; BODY_JOINTS],
            p_hand: vec![[0.0; 3]; hand_joints],
            p_shape: [0.0; SHAPE_DIM],
            p_face: [0.0; SHAPE_DIM],
            p_camera: None,
        }
    }

    pub fn zeros_for(asset: &BodyModelAsset) -> Self {
        Self::zeros(asset.num_hand_joints())
    }

    pub fn check_dims(&self, asset: &BodyModelAsset) -> Result<()> {
        crate::error::ensure_len("p_body rows", BODY_JOINTS, self.p_body.len())?;
        crate::error::ensure_len("p_hand rows", asset.num_hand_joints(), self.p_hand.len())?;
        if !self.flat_pose_shape().iter().all(|x| x.is_finite()) {
            return Err(MucError::NonFinite("pose/shape parameters".into()));
        }
        Ok(())
    }

    /// Body pose, hand pose, shape, expression concatenated (camera excluded).
    pub fn flat_pose_shape(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * (self.p_body.len() + self.p_hand.len()) + 2 * SHAPE_DIM);
        out.extend(self.p_body.iter().flatten());
        out.extend(self.p_hand.iter().flatten());
        out.extend(self.p_shape);
        out.extend(self.p_face);
        out
    }

    /// Copy with every axis-angle reduced below pi.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        out.p_body.iter_mut().for_each(|r| *r = canonicalize_axis_angle(*r));
        out.p_hand.iter_mut().for_each(|r| *r = canonicalize_axis_angle(*r));
        out
    }
}
