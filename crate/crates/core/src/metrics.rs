//! Position errors in millimeters and Procrustes alignment.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModelAsset, PosedBody};
use crate::error::{ensure_len, MucError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcrustesMode {
    #[default]
    Similarity,
    Rigid,
}

/// `x -> scale * rotation * x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.scale * self.rotation * Vector3::from(*p) + self.translation;
        [q.x, q.y, q.z]
    }
}

fn centroid(p: &[[f64; 3]]) -> Vector3<f64> {
    p.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / p.len() as f64
}

/// Least-squares similarity alignment of `pred` onto `gt`.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(Vec<[f64; 3]>, Similarity)> {
    procrustes_align_mode(pred, gt, ProcrustesMode::Similarity)
}

pub fn procrustes_align_mode(pred: &[[f64; 3]], gt: &[[f64; 3]], mode: ProcrustesMode) -> Result<(Vec<[f64; 3]>, Similarity)> {
    ensure_len("procrustes points", gt.len(), pred.len())?;
    if gt.len() < 3 {
        return Err(MucError::DegenerateAlignment(format!("{} points, need at least 3", gt.len())));
    }
    if pred.iter().chain(gt).flatten().any(|x| !x.is_finite()) {
        return Err(MucError::NonFinite("procrustes input".into()));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut h = Matrix3::zeros();
    let mut gg = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let x = Vector3::from(*p) - mp;
        let y = Vector3::from(*g) - mg;
        h += y * x.transpose();
        gg += y * y.transpose();
        var_p += x.norm_squared();
    }
    let sg = gg.symmetric_eigenvalues();
    let mut ev = [sg[0], sg[1], sg[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 1e-24 || ev[1] <= 1e-12 * ev[0] {
        return Err(MucError::DegenerateAlignment("ground truth has rank below 2".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    // Sort singular values so the reflection fix hits the smallest one.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[order[2]] = d;
    let rotation = u * Matrix3::from_diagonal(&diag) * vt;
    let scale = match mode {
        ProcrustesMode::Rigid => 1.0,
        ProcrustesMode::Similarity if var_p > 0.0 => (0..3).map(|i| svd.singular_values[i] * diag[i]).sum::<f64>() / var_p,
        ProcrustesMode::Similarity => 0.0,
    };
    let translation = mg - scale * rotation * mp;
    let t = Similarity { scale, rotation, translation };
    Ok((pred.iter().map(|p| t.apply(p)).collect(), t))
}

/// Mean Euclidean distance in millimeters for inputs in meters.
pub fn mean_position_error(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    ensure_len("position error points", gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(MucError::InvalidArgument("no points to compare".into()));
    }
    let s: f64 = pred.iter().zip(gt).map(|(a, b)| (Vector3::from(*a) - Vector3::from(*b)).norm()).sum();
    Ok(1000.0 * s / gt.len() as f64)
}

pub fn pa_mean_position_error(pred: &[[f64; 3]], gt: &[[f64; 3]], mode: ProcrustesMode) -> Result<f64> {
    let (aligned, _) = procrustes_align_mode(pred, gt, mode)?;
    mean_position_error(&aligned, gt)
}

/// Errors of one fused body, all in millimeters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub pa_mpvpe: f64,
    pub hand_pa_mpjpe: f64,
    pub hand_pa_mpvpe: f64,
    pub face_pa_mpvpe: f64,
}

impl MetricReport {
    pub fn as_array(&self) -> [f64; 7] {
        [self.mpjpe, self.pa_mpjpe, self.mpvpe, self.pa_mpvpe, self.hand_pa_mpjpe, self.hand_pa_mpvpe, self.face_pa_mpvpe]
    }

    fn from_array(a: [f64; 7]) -> Self {
        MetricReport { mpjpe: a[0], pa_mpjpe: a[1], mpvpe: a[2], pa_mpvpe: a[3], hand_pa_mpjpe: a[4], hand_pa_mpvpe: a[5], face_pa_mpvpe: a[6] }
    }

    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(MucError::InvalidArgument("no reports to average".into()));
        }
        let mut acc = [0.0; 7];
        for r in reports {
            acc.iter_mut().zip(r.as_array()).for_each(|(a, x)| *a += x);
        }
        Ok(Self::from_array(acc.map(|a| a / reports.len() as f64)))
    }
}

fn select(points: &[[f64; 3]], idx: &[usize]) -> Vec<[f64; 3]> {
    idx.iter().map(|&i| points[i]).collect()
}

/// Whole-body errors plus part errors, each part aligned on its own points.
/// Parts with fewer than 3 points report 0.
pub fn evaluate_body(pred: &PosedBody, gt: &PosedBody, asset: &BodyModelAsset, mode: ProcrustesMode) -> Result<MetricReport> {
    let part = |pts_p: &[[f64; 3]], pts_g: &[[f64; 3]], idx: &[usize]| -> Result<f64> {
        if idx.len() < 3 {
            return Ok(0.0);
        }
        let (p, g) = (select(pts_p, idx), select(pts_g, idx));
        match pa_mean_position_error(&p, &g, mode) {
            // Collinear parts (a straight finger chain) fall back to centroid alignment.
            Err(MucError::DegenerateAlignment(_)) => {
                let shift = centroid(&g) - centroid(&p);
                let moved: Vec<[f64; 3]> = p.iter().map(|x| (Vector3::from(*x) + shift).into()).collect();
                mean_position_error(&moved, &g)
            }
            r => r,
        }
    };
    let hands = asset.hand_joints();
    let hand_verts = asset.hand_region_vertices();
    Ok(MetricReport {
        mpjpe: mean_position_error(&pred.joints, &gt.joints)?,
        pa_mpjpe: pa_mean_position_error(&pred.joints, &gt.joints, mode)?,
        mpvpe: mean_position_error(&pred.vertices, &gt.vertices)?,
        pa_mpvpe: pa_mean_position_error(&pred.vertices, &gt.vertices, mode)?,
        hand_pa_mpjpe: part(&pred.joints, &gt.joints, &hands)?,
        hand_pa_mpvpe: part(&pred.vertices, &gt.vertices, &hand_verts)?,
        face_pa_mpvpe: part(&pred.vertices, &gt.vertices, &asset.face_region_vertices)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene_id: String,
    pub n_cameras: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub fn metric_rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scene_id", "n_cameras", "mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe", "hand_pa_mpjpe", "hand_pa_mpvpe", "face_pa_mpvpe"])
        .map_err(|e| MucError::Format(e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.scene_id.clone(), r.n_cameras.to_string()];
        rec.extend(r.report.as_array().iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| MucError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MucError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MucError::Format(e.to_string()))
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metric_rows_to_csv(rows)?).map_err(|e| MucError::io(path, e))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| MucError::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| MucError::Format(e.to_string()))?;
        if rec.len() != 9 {
            return Err(MucError::Format(format!("metric row has {} fields", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| MucError::Format(format!("field {i}: {e}")));
        let mut a = [0.0; 7];
        for (k, x) in a.iter_mut().enumerate() {
            *x = num(k + 2)?;
        }
        let n_cameras = rec[1].parse().map_err(|e| MucError::Format(format!("n_cameras: {e}")))?;
        out.push(MetricRow { scene_id: rec[0].to_string(), n_cameras, report: MetricReport::from_array(a) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 3]> {
        (0..k).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()
    }

    fn transform(p: &[[f64; 3]], s: f64, r: &Matrix3<f64>, t: Vector3<f64>) -> Vec<[f64; 3]> {
        Similarity { scale: s, rotation: *r, translation: t }.apply_all(p)
    }

    impl Similarity {
        fn apply_all(&self, p: &[[f64; 3]]) -> Vec<[f64; 3]> {
            p.iter().map(|x| self.apply(x)).collect()
        }
    }

    #[test]
    fn recovers_exact_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = cloud(&mut rng, 20);
        let rz = *Rotation3::from_axis_angle(&Vector3::z_axis(), 30f64.to_radians()).matrix();
        let pred = transform(&gt, 2.0, &rz, Vector3::new(1.0, 2.0, 3.0));
        let (aligned, t) = procrustes_align(&pred, &gt).unwrap();
        for (a, g) in aligned.iter().zip(&gt) {
            (0..3).for_each(|i| assert!((a[i] - g[i]).abs() < 1e-9));
        }
        assert!((t.scale - 0.5).abs() < 1e-12);
        assert!((t.rotation * rz - Matrix3::identity()).abs().max() < 1e-12);
        // Composing the recovered map with the forward one gives the identity.
        let back = t.apply_all(&pred);
        let round = transform(&back, 2.0, &rz, Vector3::new(1.0, 2.0, 3.0));
        for (a, b) in round.iter().zip(&pred) {
            (0..3).for_each(|i| assert!((a[i] - b[i]).abs() < 1e-9));
        }
    }

    #[test]
    fn identity_when_equal() {
        let gt = cloud(&mut ChaCha8Rng::seed_from_u64(5), 10);
        let (_, t) = procrustes_align(&gt, &gt).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    fn sq_residual(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (Vector3::from(*x) - Vector3::from(*y)).norm_squared()).sum()
    }

    #[test]
    fn outlier_alignment_reduces_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = cloud(&mut rng, 30);
        let mut pred = gt.clone();
        pred[7][0] += 0.8;
        let (aligned, _) = procrustes_align(&pred, &gt).unwrap();
        assert!(sq_residual(&aligned, &gt) < sq_residual(&pred, &gt));
        // The least-squares fit spreads the outlier over every point, so the mean
        // distance goes up here: 26.7 mm before, about 64 mm after.
        let raw = mean_position_error(&pred, &gt).unwrap();
        let pa = pa_mean_position_error(&pred, &gt, ProcrustesMode::Similarity).unwrap();
        assert!(pa > raw, "{pa} vs {raw}");
    }

    #[test]
    fn translation_error_is_five_mm() {
        let gt = cloud(&mut ChaCha8Rng::seed_from_u64(7), 12);
        assert_eq!(mean_position_error(&gt, &gt).unwrap(), 0.0);
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 0.003, p[1], p[2] + 0.004]).collect();
        let oracle = 1000.0 * (0.003f64.powi(2) + 0.004f64.powi(2)).sqrt();
        assert!((oracle - 5.0).abs() < 1e-12);
        assert!((mean_position_error(&pred, &gt).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn reflection_is_corrected() {
        let gt = cloud(&mut ChaCha8Rng::seed_from_u64(8), 15);
        let mirror: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let (_, t) = procrustes_align(&mirror, &gt).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rigid_mode_keeps_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = cloud(&mut rng, 15);
        let pred = transform(&gt, 1.5, &Matrix3::identity(), Vector3::zeros());
        let (_, t) = procrustes_align_mode(&pred, &gt, ProcrustesMode::Rigid).unwrap();
        assert_eq!(t.scale, 1.0);
        assert!(pa_mean_position_error(&pred, &gt, ProcrustesMode::Rigid).unwrap() > 1.0);
        assert!(pa_mean_position_error(&pred, &gt, ProcrustesMode::Similarity).unwrap() < 1e-6);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(procrustes_align(&line, &line), Err(MucError::DegenerateAlignment(_))));
        let same = vec![[1.0, 1.0, 1.0]; 4];
        assert!(matches!(procrustes_align(&same, &same), Err(MucError::DegenerateAlignment(_))));
        let two = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(procrustes_align(&two, &two).is_err());
        let gt = cloud(&mut ChaCha8Rng::seed_from_u64(1), 5);
        assert!(procrustes_align(&gt[..4], &gt).is_err());
        // Collapsed prediction aligns to the gt centroid.
        let (aligned, t) = procrustes_align(&vec![[0.2; 3]; 5], &gt).unwrap();
        assert_eq!(t.scale, 0.0);
        let c = centroid(&gt);
        assert!((Vector3::from(aligned[0]) - c).norm() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricRow { scene_id: "s0".into(), n_cameras: 2, report: MetricReport::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.125]) },
            MetricRow { scene_id: "s1".into(), n_cameras: 4, report: MetricReport::default() },
        ];
        let text = metric_rows_to_csv(&rows).unwrap();
        assert!(text.starts_with("scene_id,n_cameras,mpjpe,pa_mpjpe,mpvpe,pa_mpvpe,hand_pa_mpjpe,hand_pa_mpvpe,face_pa_mpvpe\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metric_csv(&p, &rows).unwrap();
        assert_eq!(read_metric_csv(&p).unwrap(), rows);
        let m = MetricReport::mean(&[rows[0].report, rows[1].report]).unwrap();
        assert_eq!(m.face_pa_mpvpe, 0.0625);
    }

    #[test]
    fn toy_body_report() {
        use crate::body::{lbs_forward, make_toy_asset, ParamSet};
        let asset = make_toy_asset(200, 25, 1).unwrap();
        let mut p = ParamSet::zeros_for(&asset);
        let gt = lbs_forward(&asset, &p).unwrap();
        let r = evaluate_body(&gt, &gt, &asset, ProcrustesMode::Similarity).unwrap();
        assert!(r.as_array().iter().all(|&x| x.abs() < 1e-6));
        p.p_body[3] = [0.3, -0.2, 0.1];
        p.p_hand[0] = [0.4, 0.0, 0.2];
        let pred = lbs_forward(&asset, &p).unwrap();
        let r = evaluate_body(&pred, &gt, &asset, ProcrustesMode::Similarity).unwrap();
        assert!(r.mpjpe > 0.0 && r.mpvpe > 0.0 && r.hand_pa_mpjpe > 0.0);
        assert!(r.as_array().iter().all(|&x| x >= 0.0 && x.is_finite()));
        let (aligned, _) = procrustes_align(&pred.vertices, &gt.vertices).unwrap();
        assert!(sq_residual(&aligned, &gt.vertices) <= sq_residual(&pred.vertices, &gt.vertices));
    }

    fn arb_cloud(k: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), k)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn alignment_never_increases_squared_residual(gt in arb_cloud(12), pred in arb_cloud(12)) {
            for mode in [ProcrustesMode::Similarity, ProcrustesMode::Rigid] {
                if let Ok((aligned, _)) = procrustes_align_mode(&pred, &gt, mode) {
                    prop_assert!(sq_residual(&aligned, &gt) <= sq_residual(&pred, &gt) + 1e-9);
                }
            }
        }

        #[test]
        fn pa_at_most_raw_for_noisy_similarity_copies(
            gt in arb_cloud(20),
            noise in arb_cloud(20),
            s in 0.5f64..2.0,
            axis in prop::array::uniform3(-1.0f64..1.0),
            t in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = *Rotation3::from_scaled_axis(axis).matrix();
            let mut pred = transform(&gt, s, &r, Vector3::from(t));
            pred.iter_mut().zip(&noise).for_each(|(p, n)| (0..3).for_each(|i| p[i] += 0.01 * n[i]));
            let raw = mean_position_error(&pred, &gt).unwrap();
            let pa = pa_mean_position_error(&pred, &gt, ProcrustesMode::Similarity).unwrap();
            prop_assert!(pa <= raw);
        }

        #[test]
        fn rotation_is_proper(gt in arb_cloud(8), pred in arb_cloud(8)) {
            if let Ok((_, t)) = procrustes_align(&pred, &gt) {
                prop_assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).abs().max() < 1e-9);
                prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }
}
