use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Axis-angle to rotation matrix. Exact identity for the zero vector.
pub fn rodrigues(aa: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(aa);
    let theta = v.norm();
    let k = skew(&v);
    if theta < 1e-12 {
        return Matrix3::identity() + k;
    }
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + k * (s / theta) + k * k * ((1.0 - c) / (theta * theta))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix to axis-angle with magnitude in [0, pi].
pub fn axis_angle_of(r: &Matrix3<f64>) -> [f64; 3] {
    Rotation3::from_matrix_unchecked(*r).scaled_axis().into()
}

/// Same rotation with magnitude reduced below pi (pi itself is kept).
pub fn canonicalize_axis_angle(aa: [f64; 3]) -> [f64; 3] {
    let v = Vector3::from(aa);
    let theta = v.norm();
    if theta <= PI {
        return aa;
    }
    let axis = v / theta;
    let mut m = theta.rem_euclid(TAU);
    let mut axis = axis;
    if m > PI {
        m = TAU - m;
        axis = -axis;
    }
    (axis * m).into()
}

/// Geodesic angle between two rotations given as axis-angle.
pub fn angular_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let rel = rodrigues(a).transpose() * rodrigues(b);
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
