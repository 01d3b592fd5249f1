//! Synthetic scenes: ground-truth bodies, camera rings and per-view estimates whose
//! error grows with joint depth.

mod dataset;

pub use dataset::{filter_split, read_dataset, read_dataset_checked, write_dataset, DatasetHeader, DATASET_FORMAT, DATASET_VERSION};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{lbs_forward, BodyModelAsset, ParamSet, BODY_JOINTS, SHAPE_DIM};
use crate::camera::{joint_distance_table, project_points, CameraParams};
use crate::error::{MucError, Result};
use crate::jrn::ViewFeature;

pub const MAX_CAMERAS: usize = 8;
const CAMERA_RETRIES: usize = 32;
const FEATURE_SEED: u64 = 0x6d75_635f_6665_6174;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Radians.
    pub base_sigma_rot: f64,
    /// Radians per unit of normalized distance.
    pub distance_gain: f64,
    pub sigma_shape: f64,
    pub sigma_face: f64,
    /// 1 means features are a clean affine code of the noise scales, 0 means pure noise.
    pub feature_informativeness: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { base_sigma_rot: 0.05, distance_gain: 0.3, sigma_shape: 0.5, sigma_face: 0.5, feature_informativeness: 0.9 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig { base_sigma_rot: 0.0, distance_gain: 0.0, sigma_shape: 0.0, sigma_face: 0.0, feature_informativeness: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.base_sigma_rot, self.distance_gain, self.sigma_shape, self.sigma_face, self.feature_informativeness];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MucError::Config(format!("noise values {v:?} must be finite and nonnegative")));
        }
        if self.base_sigma_rot + self.distance_gain > 0.5 {
            return Err(MucError::Config("base_sigma_rot + distance_gain must not exceed 0.5 rad".into()));
        }
        if self.feature_informativeness > 1.0 {
            return Err(MucError::Config("feature_informativeness must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn max_sigma(&self) -> f64 {
        self.base_sigma_rot + self.distance_gain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub split: Split,
    pub gt_params: ParamSet,
    pub cameras: Vec<CameraParams>,
    pub view_estimates: Vec<ParamSet>,
    pub view_features: Vec<ViewFeature>,
    /// Ground-truth joints projected into each view, all joints.
    pub gt_joints2d: Vec<Vec<[f64; 2]>>,
}

impl SceneSample {
    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    /// Same scene restricted to its first `k` views.
    pub fn first_views(&self, k: usize) -> Result<SceneSample> {
        if k == 0 || k > self.n_cameras() {
            return Err(MucError::InvalidArgument(format!("k = {k} views requested from a {}-view scene", self.n_cameras())));
        }
        Ok(SceneSample {
            scene_id: self.scene_id.clone(),
            split: self.split,
            gt_params: self.gt_params.clone(),
            cameras: self.cameras[..k].to_vec(),
            view_estimates: self.view_estimates[..k].to_vec(),
            view_features: self.view_features[..k].to_vec(),
            gt_joints2d: self.gt_joints2d[..k].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub noise: NoiseConfig,
    pub task_dim: usize,
    pub hand_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { n_cameras: 4, noise: NoiseConfig::default(), task_dim: 32, hand_dim: 16 }
    }
}

/// Per-view noise scales derived from joint depths.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewNoise {
    pub body_sigma: Vec<f64>,
    pub hand_sigma: Vec<f64>,
    pub shape_sigma: f64,
    pub face_sigma: f64,
}

/// Noise scales of one camera looking at the given posed joints.
pub fn view_noise(asset: &BodyModelAsset, joints: &[[f64; 3]], camera: &CameraParams, noise: &NoiseConfig) -> Result<ViewNoise> {
    let body_rows: Vec<Option<usize>> = (0..BODY_JOINTS).map(|r| asset.body_joint(r)).collect();
    let driven: Vec<[f64; 3]> = body_rows.iter().flatten().map(|&j| joints[j]).collect();
    let table = joint_distance_table(camera, &driven)?;
    let depths: Vec<f64> = table.records.iter().map(|r| r[2]).collect();
    let lo = depths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma = |nd: f64| noise.base_sigma_rot + noise.distance_gain * nd;
    let mut it = table.normalized.iter();
    let body_sigma = body_rows.iter().map(|r| sigma(if r.is_some() { *it.next().unwrap() } else { 0.0 })).collect();
    let hand_pts: Vec<[f64; 3]> = asset.hand_joints().iter().map(|&j| joints[j]).collect();
    let hand_depth = camera.to_camera_frame(&hand_pts);
    let hand_sigma = hand_depth
        .iter()
        .map(|p| sigma(if hi > lo { ((p.z - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 }))
        .collect();
    let mean_depth = depths.iter().sum::<f64>() / depths.len() as f64;
    Ok(ViewNoise { body_sigma, hand_sigma, shape_sigma: noise.sigma_shape * mean_depth / 3.0, face_sigma: noise.sigma_face * mean_depth / 3.0 })
}

/// Fixed affine code `A s + b` shared by all scenes of a given width.
fn feature_code(out: usize, inp: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED ^ ((out as u64) << 32 | inp as u64));
    let scale = 1.0 / (inp.max(1) as f64).sqrt();
    let a = DMatrix::from_fn(out, inp, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let b = DVector::from_fn(out, |_, _| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    (a, b)
}

fn feature<R: Rng>(code: &(DMatrix<f64>, DVector<f64>), s: &[f64], informativeness: f64, rng: &mut R) -> Vec<f64> {
    let clean = &code.0 * DVector::from_column_slice(s) + &code.1;
    clean
        .iter()
        .map(|&c| {
            let xi: f64 = StandardNormal.sample(rng);
            informativeness * c + (1.0 - informativeness) * xi
        })
        .collect()
}

fn perturb<R: Rng>(x: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        x + Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        x
    }
}

fn sample_camera<R: Rng>(center: Vector3<f64>, index: usize, n: usize, offset: f64, rng: &mut R) -> Result<CameraParams> {
    let radius = rng.random_range(2.0..4.0);
    let az = offset + std::f64::consts::TAU * index as f64 / n as f64 + rng.random_range(-0.3..0.3);
    let height = rng.random_range(-0.3..0.3);
    let eye = center + Vector3::new(radius * az.cos(), radius * az.sin(), height);
    let focal = rng.random_range(500.0..600.0);
    CameraParams::look_at(eye, center, Vector3::z(), focal, [512, 512])
}

pub fn sample_scene(asset: &BodyModelAsset, n_cameras: usize, noise: &NoiseConfig, seed: u64) -> Result<SceneSample> {
    let cfg = SceneConfig { n_cameras, noise: *noise, ..SceneConfig::default() };
    sample_scene_with(asset, &cfg, seed, Split::Train, format!("scene-{seed}"))
}

pub fn sample_scene_with(asset: &BodyModelAsset, cfg: &SceneConfig, seed: u64, split: Split, scene_id: String) -> Result<SceneSample> {
    if cfg.n_cameras == 0 || cfg.n_cameras > MAX_CAMERAS {
        return Err(MucError::InvalidArgument(format!("n_cameras = {} outside 1..={MAX_CAMERAS}", cfg.n_cameras)));
    }
    cfg.noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut gt = ParamSet::zeros_for(asset);
    for (r, row) in gt.p_body.iter_mut().enumerate() {
        let lim = if r == 0 { 0.3 } else { 0.5 };
        *row = [0; 3].map(|_| rng.random_range(-lim..lim));
    }
    gt.p_hand.iter_mut().for_each(|row| *row = [0; 3].map(|_| rng.random_range(-0.5..0.5)));
    gt.p_shape = [0; SHAPE_DIM].map(|_| StandardNormal.sample(&mut rng));
    gt.p_face = [0; SHAPE_DIM].map(|_| StandardNormal.sample(&mut rng));
    let body = lbs_forward(asset, &gt)?;
    let center = body.joints.iter().fold(Vector3::zeros(), |a, j| a + Vector3::from(*j)) / body.joints.len() as f64;

    let mut cameras = None;
    for _ in 0..CAMERA_RETRIES {
        let offset = rng.random_range(0.0..std::f64::consts::TAU);
        let cams = (0..cfg.n_cameras).map(|c| sample_camera(center, c, cfg.n_cameras, offset, &mut rng)).collect::<Result<Vec<_>>>()?;
        if cams.iter().all(|c| project_points(c, &body.joints).is_ok()) {
            cameras = Some(cams);
            break;
        }
    }
    let cameras = cameras.ok_or_else(|| MucError::InvalidArgument(format!("no valid camera ring after {CAMERA_RETRIES} tries")))?;

    let task_code = feature_code(cfg.task_dim, BODY_JOINTS);
    let hand_code = feature_code(cfg.hand_dim, asset.num_hand_joints());
    let max_sigma = cfg.noise.max_sigma();
    let unit = |s: &[f64]| -> Vec<f64> { s.iter().map(|x| if max_sigma > 0.0 { x / max_sigma } else { 0.0 }).collect() };

    let mut view_estimates = Vec::with_capacity(cfg.n_cameras);
    let mut view_features = Vec::with_capacity(cfg.n_cameras);
    let mut gt_joints2d = Vec::with_capacity(cfg.n_cameras);
    for cam in &cameras {
        let vn = view_noise(asset, &body.joints, cam, &cfg.noise)?;
        let mut est = gt.clone();
        for (row, &s) in est.p_body.iter_mut().zip(&vn.body_sigma) {
            row.iter_mut().for_each(|x| *x = perturb(*x, s, &mut rng));
        }
        for (row, &s) in est.p_hand.iter_mut().zip(&vn.hand_sigma) {
            row.iter_mut().for_each(|x| *x = perturb(*x, s, &mut rng));
        }
        est.p_shape.iter_mut().for_each(|x| *x = perturb(*x, vn.shape_sigma, &mut rng));
        est.p_face.iter_mut().for_each(|x| *x = perturb(*x, vn.face_sigma, &mut rng));
        est.p_camera = Some(cam.clone());
        let inf = cfg.noise.feature_informativeness;
        view_features.push(ViewFeature {
            task_feature: feature(&task_code, &unit(&vn.body_sigma), inf, &mut rng),
            hand_feature: feature(&hand_code, &unit(&vn.hand_sigma), inf, &mut rng),
        });
        view_estimates.push(est);
        gt_joints2d.push(project_points(cam, &body.joints)?);
    }
    Ok(SceneSample { scene_id, split, gt_params: gt, cameras, view_estimates, view_features, gt_joints2d })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
}

/// Scenes in train, val, test order; scene `i` uses seed `seed + i`.
pub fn generate_dataset(asset: &BodyModelAsset, spec: &DatasetSpec, seed: u64) -> Result<Vec<SceneSample>> {
    let splits = std::iter::repeat_n(Split::Train, spec.n_train)
        .chain(std::iter::repeat_n(Split::Val, spec.n_val))
        .chain(std::iter::repeat_n(Split::Test, spec.n_test));
    splits
        .enumerate()
        .map(|(i, split)| sample_scene_with(asset, &spec.scene, seed.wrapping_add(i as u64), split, format!("{}-{i:05}", split.as_str())))
        .collect()
}
