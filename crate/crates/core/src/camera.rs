//! Pinhole cameras, joint projection and per-view joint distance tables.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MucError, Result};

/// Minimum camera-frame depth (meters) for a projectable point.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera with world-to-camera extrinsics (OpenCV axes: x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub image_size: [u32; 2],
}

impl CameraParams {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: [f64; 2],
        principal: [f64; 2],
        image_size: [u32; 2],
    ) -> Result<Self> {
        let cam = CameraParams {
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| rotation[(r, c)])),
            translation: translation.into(),
            focal,
            principal,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with image y pointing away from `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        image_size: [u32; 2],
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(MucError::InvalidArgument("look_at direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let principal = [image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0];
        Self::new(r, -(r * eye), [focal, focal], principal, image_size)
    }

    /// Identity extrinsics with the given intrinsics.
    pub fn identity(focal: [f64; 2], principal: [f64; 2]) -> Self {
        CameraParams {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal,
            principal,
            image_size: [(2.0 * principal[0]).max(1.0) as u32, (2.0 * principal[1]).max(1.0) as u32],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let finite = r.iter().chain(&self.translation).chain(&self.focal).chain(&self.principal).all(|x| x.is_finite());
        if !finite {
            return Err(MucError::NonFinite("camera parameters".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(MucError::InvalidArgument(format!(
                "camera rotation not a proper rotation (orthogonality error {ortho:.3e})"
            )));
        }
        if self.focal.iter().any(|&f| f <= 0.0) {
            return Err(MucError::InvalidArgument("focal length must be positive".into()));
        }
        Ok(())
    }

    /// World points in camera coordinates, `R p + t`.
    pub fn to_camera_frame(&self, points: &[[f64; 3]]) -> Vec<Vector3<f64>> {
        let r = self.rotation_matrix();
        let t = self.translation_vector();
        points.iter().map(|p| r * Vector3::from(*p) + t).collect()
    }

    fn depths_checked(&self, points: &[[f64; 3]]) -> Result<Vec<Vector3<f64>>> {
        let cam = self.to_camera_frame(points);
        if cam.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(MucError::NonFinite("projected points".into()));
        }
        let behind: Vec<usize> = cam
            .iter()
            .enumerate()
            .filter(|(_, p)| p.z <= MIN_DEPTH)
            .map(|(i, _)| i)
            .collect();
        if !behind.is_empty() {
            return Err(MucError::BehindCamera { indices: behind });
        }
        Ok(cam)
    }
}

/// Pinhole projection `u = fx x_c / z_c + cx`, `v = fy y_c / z_c + cy`.
pub fn project_points(camera: &CameraParams, points: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
    let cam = camera.depths_checked(points)?;
    Ok(cam
        .iter()
        .map(|p| {
            [
                camera.focal[0] * p.x / p.z + camera.principal[0],
                camera.focal[1] * p.y / p.z + camera.principal[1],
            ]
        })
        .collect())
}

/// Per-joint `(u, v, depth)` records plus the min-subtracted, range-scaled depths.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistanceTable {
    pub records: Vec<[f64; 3]>,
    pub normalized: Vec<f64>,
}

/// `(d - min d) / (max d - min d)`; all zeros when every distance is equal.
pub fn normalize_distances(d: &[f64]) -> Vec<f64> {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; d.len()];
    }
    d.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Distance table for one camera over the given joints (normally the 21 body joints).
pub fn joint_distance_table(camera: &CameraParams, joints: &[[f64; 3]]) -> Result<JointDistanceTable> {
    let cam = camera.depths_checked(joints)?;
    let records: Vec<[f64; 3]> = cam
        .iter()
        .map(|p| {
            [
                camera.focal[0] * p.x / p.z + camera.principal[0],
                camera.focal[1] * p.y / p.z + camera.principal[1],
                p.z,
            ]
        })
        .collect();
    let depths: Vec<f64> = records.iter().map(|r| r[2]).collect();
    Ok(JointDistanceTable {
        normalized: normalize_distances(&depths),
        records,
    })
}

/// Conditioning input for the scoring networks: the first two rotation columns then the
/// translation.
pub fn camera_condition_vector(camera: &CameraParams) -> [f64; 9] {
    let r = &camera.rotation;
    let t = &camera.translation;
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1], t[0], t[1], t[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn rz(theta: f64) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), theta).matrix()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = CameraParams::identity([1.0, 1.0], [0.0, 0.0]);
        assert_eq!(project_points(&cam, &[[0.0, 0.0, 1.0]]).unwrap(), vec![[0.0, 0.0]]);
    }

    #[test]
    fn projection_formula() {
        let cam = CameraParams::identity([100.0, 100.0], [50.0, 50.0]);
        let uv = project_points(&cam, &[[0.1, 0.2, 2.0]]).unwrap()[0];
        assert!((uv[0] - 55.0).abs() < 1e-12 && (uv[1] - 60.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_names_indices() {
        let cam = CameraParams::identity([1.0, 1.0], [0.0, 0.0]);
        let err = project_points(&cam, &[[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, -2.0]]).unwrap_err();
        match err {
            MucError::BehindCamera { indices } => assert_eq!(indices, vec![1, 2]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn min_range_normalization() {
        assert_eq!(normalize_distances(&[2.0, 5.0, 4.0]), vec![0.0, 1.0, 2.0 / 3.0]);
        let cam = CameraParams::identity([1.0, 1.0], [0.0, 0.0]);
        let t = joint_distance_table(&cam, &[[0.0, 0.0, 2.0], [0.3, 0.0, 5.0], [0.0, 0.1, 4.0]]).unwrap();
        assert!((t.normalized[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.records[1][2], 5.0);
    }

    #[test]
    fn equidistant_joints_give_zeros() {
        let cam = CameraParams::identity([1.0, 1.0], [0.0, 0.0]);
        let t = joint_distance_table(&cam, &[[0.0, 0.0, 3.0], [1.0, 0.0, 3.0], [0.0, -1.0, 3.0]]).unwrap();
        assert_eq!(t.normalized, vec![0.0; 3]);
    }

    #[test]
    fn retreating_camera_keeps_depth_order() {
        let joints = [[0.1, 0.0, 0.2], [0.0, 0.2, -0.1], [-0.2, 0.1, 0.0], [0.0, 0.0, 0.3]];
        let near = CameraParams::look_at(Vector3::new(0.0, -3.0, 0.0), Vector3::zeros(), Vector3::z(), 500.0, [512, 512]).unwrap();
        let mut far = near.clone();
        far.translation[2] += 10.0;
        let a = joint_distance_table(&near, &joints).unwrap().normalized;
        let b = joint_distance_table(&far, &joints).unwrap().normalized;
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            idx
        };
        assert_eq!(rank(&a), rank(&b));
    }

    #[test]
    fn condition_vector_layout() {
        let cam = CameraParams::identity([1.0, 1.0], [0.0, 0.0]);
        assert_eq!(camera_condition_vector(&cam), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let cam = CameraParams::new(rz(std::f64::consts::FRAC_PI_2), Vector3::new(1.0, 2.0, 3.0), [1.0, 1.0], [0.0, 0.0], [1, 1]).unwrap();
        let c = camera_condition_vector(&cam);
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let other = CameraParams::new(rz(0.3), Vector3::new(1.0, 2.0, 3.0), [1.0, 1.0], [0.0, 0.0], [1, 1]).unwrap();
        assert_ne!(camera_condition_vector(&other), c);
    }

    #[test]
    fn rejects_improper_rotation() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(CameraParams::new(m, Vector3::zeros(), [1.0, 1.0], [0.0, 0.0], [1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn projection_invariant_under_joint_rigid_motion(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
            tx in -2.0..2.0f64, ty in -2.0..2.0f64, tz in -2.0..2.0f64,
        ) {
            let cam = CameraParams::look_at(Vector3::new(0.5, -3.0, 0.4), Vector3::zeros(), Vector3::z(), 600.0, [640, 480]).unwrap();
            let pts = [[0.1, 0.2, 0.3], [-0.3, 0.1, 0.0], [0.0, -0.2, 0.5]];
            let g = Rotation3::new(Vector3::new(ax, ay, az));
            let gt = Vector3::new(tx, ty, tz);
            let moved: Vec<[f64; 3]> = pts.iter().map(|p| (g * Vector3::from(*p) + gt).into()).collect();
            // Camera pose composed with the inverse motion.
            let r = cam.rotation_matrix() * g.matrix().transpose();
            let t = cam.translation_vector() - r * gt;
            let cam2 = CameraParams::new(r, t, cam.focal, cam.principal, cam.image_size).unwrap();
            let a = project_points(&cam, &pts).unwrap();
            let b = project_points(&cam2, &moved).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn uniform_depth_offset_preserves_rank(d in proptest::collection::vec(0.5..5.0f64, 2..30), off in 0.0..20.0f64) {
            let a = normalize_distances(&d);
            let shifted: Vec<f64> = d.iter().map(|x| x + off).collect();
            let b = normalize_distances(&shifted);
            for i in 0..d.len() {
                for j in 0..d.len() {
                    if d[i] < d[j] - 1e-9 {
                        prop_assert!(b[i] <= b[j]);
                        prop_assert!(a[i] <= a[j]);
                    }
                }
                prop_assert!(b[i].is_finite());
            }
        }
    }
}
