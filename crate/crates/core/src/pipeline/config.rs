//! Run configuration, read from TOML. Unknown keys are rejected everywhere.
//!
//! ```toml
//! seed = 7
//!
//! [asset]            # toy body
//! num_vertices = 200
//! num_joints = 25
//! hand_joints_per_hand = 2
//! seed = 1
//!
//! [data]             # scene counts per split
//! n_train = 256
//! n_val = 64
//! n_test = 512
//! [data.scene]
//! n_cameras = 4
//! task_dim = 32
//! hand_dim = 16
//! [data.scene.noise]
//! base_sigma_rot = 0.05
//! distance_gain = 0.3
//! sigma_shape = 0.5
//! sigma_face = 0.5
//! feature_informativeness = 0.9
//!
//! [jrn]
//! task_dim = 32
//! hand_dim = 16
//! hidden = [64, 64]
//! activation = "gelu"
//! hand_mode = "per_joint"
//!
//! [srn]
//! shape_res = [32, 32]
//! face_res = [16, 16]
//! base_channels = 16
//! attn_dim = 8
//! reducer_hidden = [32]
//! activation = "gelu"
//!
//! [loss]
//! smplx = 1.0
//! joint2d = 1.0
//! jrn = 1.0
//! surface = 1.0
//! temperature = 0.5
//! jrn_on_hands = false
//!
//! [train]
//! lr = 1e-3
//! epochs = 30
//! batch_size = 8
//!
//! [eval]
//! k_list = [1, 2, 3, 4]
//! procrustes = "similarity"
//!
//! [paths]
//! dataset = "data/scenes.jsonl"
//! out_dir = "runs/default"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::ToyAssetConfig;
use crate::error::{MucError, Result};
use crate::jrn::JrnSpec;
use crate::losses::LossWeights;
use crate::metrics::ProcrustesMode;
use crate::srn::SrnSpec;
use crate::synth::{DatasetSpec, SceneConfig, MAX_CAMERAS};

/// Full-scale reference schedule; desk-scale runs use [`TrainConfig::default`].
pub const REFERENCE_LR: f64 = 3e-5;
pub const REFERENCE_EPOCHS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub smplx: f64,
    pub joint2d: f64,
    pub jrn: f64,
    pub surface: f64,
    pub temperature: f64,
    #[serde(default)]
    pub jrn_on_hands: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::with_weights(LossWeights::default())
    }
}

impl LossConfig {
    pub fn with_weights(w: LossWeights) -> Self {
        LossConfig { smplx: w.smplx, joint2d: w.joint2d, jrn: w.jrn, surface: w.surface, temperature: 0.5, jrn_on_hands: false }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { smplx: self.smplx, joint2d: self.joint2d, jrn: self.jrn, surface: self.surface }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, epochs: 30, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub procrustes: ProcrustesMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_list: vec![1, 2, 3, 4], procrustes: ProcrustesMode::Similarity }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { dataset: "data/scenes.jsonl".into(), out_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub asset: ToyAssetConfig,
    pub data: DatasetSpec,
    pub jrn: JrnSpec,
    pub srn: SrnSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            asset: ToyAssetConfig { num_vertices: 200, num_joints: 25, hand_joints_per_hand: Some(2), seed: 1 },
            data: DatasetSpec { n_train: 256, n_val: 64, n_test: 512, scene: SceneConfig::default() },
            jrn: JrnSpec::default(),
            srn: SrnSpec::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Standard synthetic benchmark: 4 views, 256/64/512 scenes, 16x16 body and 8x8 face maps.
    pub fn benchmark() -> Self {
        let mut cfg = RunConfig::default();
        cfg.srn.shape_res = [16, 16];
        cfg.srn.face_res = [8, 8];
        cfg.srn.base_channels = 8;
        cfg.train.epochs = 15;
        cfg.paths.out_dir = "runs/benchmark".into();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MucError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MucError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MucError::Config(m));
        self.data.scene.noise.validate()?;
        self.loss.weights().validate()?;
        self.srn.validate()?;
        let n = self.data.scene.n_cameras;
        if n == 0 || n > MAX_CAMERAS {
            return bad(format!("n_cameras = {n} outside 1..={MAX_CAMERAS}"));
        }
        if self.data.scene.task_dim != self.jrn.task_dim || self.data.scene.hand_dim != self.jrn.hand_dim {
            return bad("feature widths in [data.scene] and [jrn] differ".into());
        }
        if !(self.loss.temperature > 0.0) || !self.loss.temperature.is_finite() {
            return bad(format!("temperature {} must be positive", self.loss.temperature));
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() || self.train.batch_size == 0 {
            return bad("lr must be positive and batch_size at least 1".into());
        }
        if self.eval.k_list.is_empty() || self.eval.k_list.iter().any(|&k| k == 0 || k > n) {
            return bad(format!("k_list {:?} must hold values in 1..={n}", self.eval.k_list));
        }
        Ok(())
    }
}

/// Small networks and a 32-scene training split for fast tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.srn = SrnSpec { shape_res: [8, 8], face_res: [8, 8], base_channels: 2, attn_dim: 2, reducer_hidden: vec![4], ..SrnSpec::default() };
    cfg.jrn.hidden = vec![16];
    cfg.data.n_train = 32;
    cfg.data.n_val = 4;
    cfg.data.n_test = 8;
    cfg.train.epochs = 2;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .skip_while(|l| !l.starts_with("```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = RunConfig::from_toml(&doc).unwrap();
        assert_eq!(cfg.jrn, JrnSpec::default());
        assert_eq!(cfg.srn, SrnSpec::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn benchmark_is_valid() {
        let cfg = RunConfig::benchmark();
        cfg.validate().unwrap();
        assert_eq!((cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.scene.n_cameras), (256, 64, 512, 4));
        assert_eq!(cfg.data.scene.noise.feature_informativeness, 0.9);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut text = RunConfig::default().to_toml();
        text = text.replacen("[train]\n", "[train]\nmomentum = 0.9\n", 1);
        assert!(matches!(RunConfig::from_toml(&text), Err(MucError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.eval.k_list = vec![1, 5];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.loss = LossConfig::with_weights(LossWeights { smplx: 0.0, joint2d: 0.0, jrn: 0.0, surface: 0.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.srn.shape_res = [30, 32];
        assert!(cfg.validate().is_err());
        assert!(matches!(RunConfig::load(Path::new("/nonexistent/cfg.toml")), Err(MucError::Io { .. })));
    }
}
