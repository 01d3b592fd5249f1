//! Joint training of both reweighting networks.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MucError, Result};
use crate::losses::{total_loss, LossComponents};
use crate::nn::graph::Graph;
use crate::nn::AdamState;
use crate::pipeline::config::RunConfig;
use crate::pipeline::eval::mean_report;
use crate::pipeline::model::{components_of, FusionMode, FusionModel, SceneTargets};
use crate::synth::SceneSample;

pub const BEST_CHECKPOINT: &str = "best.mucw";
pub const LAST_CHECKPOINT: &str = "last.mucw";
pub const LOSS_LOG: &str = "train_log.csv";

/// Mean loss components over one epoch and the validation error after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub smplx: f64,
    pub joint2d: f64,
    pub jrn: f64,
    pub surface: f64,
    pub total: f64,
    pub val_pa_mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Validation PA-MPJPE of the untrained model.
    pub initial_val_pa_mpjpe: f64,
    /// 0 when no epoch beat the untrained model.
    pub best_epoch: usize,
    pub best_val_pa_mpjpe: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Mean PA-MPJPE of full fusion over all views of each scene.
pub fn validation_error(model: &FusionModel, cfg: &RunConfig, val: &[SceneSample]) -> Result<f64> {
    let k = cfg.data.scene.n_cameras;
    Ok(mean_report(model, val, k, FusionMode::Full, cfg.eval.procrustes)?.pa_mpjpe)
}

/// One optimizer step over a batch; per-scene gradients are summed in batch order.
fn train_batch(model: &mut FusionModel, adam: &mut AdamState, cfg: &RunConfig, scenes: &[(&SceneSample, &SceneTargets)], batch_id: usize) -> Result<LossComponents> {
    let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut comps = LossComponents::default();
    for (scene, targets) in scenes {
        let mut g = Graph::new();
        let numeric = |e: MucError| match e {
            MucError::NonFinite(detail) => MucError::NumericFailure { batch: batch_id, detail },
            e => e,
        };
        let (total, parts) = model.scene_loss(&mut g, scene, targets, &cfg.loss).map_err(numeric)?;
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(MucError::NumericFailure { batch: batch_id, detail: format!("loss {value} on scene {}", scene.scene_id) });
        }
        g.backward(total).map_err(numeric)?;
        for (acc, pg) in grads.iter_mut().zip(g.param_grads(&model.store)) {
            acc.iter_mut().zip(pg).for_each(|(a, x)| *a += x);
        }
        let c = components_of(&g, &parts);
        comps.smplx += c.smplx;
        comps.joint2d += c.joint2d;
        comps.jrn += c.jrn;
        comps.surface += c.surface;
    }
    let inv = 1.0 / scenes.len() as f64;
    for acc in &mut grads {
        acc.iter_mut().for_each(|x| *x *= inv);
        if acc.iter().any(|x| !x.is_finite()) {
            return Err(MucError::NumericFailure { batch: batch_id, detail: "non-finite gradient".into() });
        }
    }
    adam.step(&mut model.store, &grads)?;
    Ok(comps)
}

/// Trains from a fresh model; writes the best and last checkpoints and the loss log into `out_dir`.
pub fn run_training(cfg: &RunConfig, train: &[SceneSample], val: &[SceneSample], out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(MucError::Config(format!("training needs train and val scenes, got {} and {}", train.len(), val.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| MucError::io(out_dir, e))?;
    let mut model = FusionModel::from_config(cfg)?;
    let targets = train.iter().map(|s| model.targets(s, cfg.loss.temperature)).collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(&model.store, cfg.train.lr);
    let best_checkpoint = out_dir.join(BEST_CHECKPOINT);
    let last_checkpoint = out_dir.join(LAST_CHECKPOINT);
    let log_path = out_dir.join(LOSS_LOG);

    let initial = validation_error(&model, cfg, val)?;
    let (mut best_epoch, mut best) = (0, initial);
    model.save_weights(&best_checkpoint, None)?;

    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut batch_id = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)));
        let mut sum = LossComponents::default();
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<(&SceneSample, &SceneTargets)> = chunk.iter().map(|&i| (&train[i], &targets[i])).collect();
            let c = train_batch(&mut model, &mut adam, cfg, &batch, batch_id)?;
            sum.smplx += c.smplx;
            sum.joint2d += c.joint2d;
            sum.jrn += c.jrn;
            sum.surface += c.surface;
            batch_id += 1;
        }
        let n = train.len() as f64;
        let mean = LossComponents { smplx: sum.smplx / n, joint2d: sum.joint2d / n, jrn: sum.jrn / n, surface: sum.surface / n };
        let val_err = validation_error(&model, cfg, val)?;
        if val_err < best {
            best = val_err;
            best_epoch = epoch;
            model.save_weights(&best_checkpoint, None)?;
        }
        log.push(EpochLog {
            epoch,
            smplx: mean.smplx,
            joint2d: mean.joint2d,
            jrn: mean.jrn,
            surface: mean.surface,
            total: total_loss(&mean, &cfg.loss.weights()),
            val_pa_mpjpe: val_err,
        });
    }
    model.save_weights(&last_checkpoint, Some(&adam))?;
    write_loss_log(&log_path, &log)?;
    Ok(TrainOutcome { log, initial_val_pa_mpjpe: initial, best_epoch, best_val_pa_mpjpe: best, best_checkpoint, last_checkpoint, log_path })
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MucError::io(path, std::io::Error::other(e)))?;
    for row in log {
        w.serialize(row).map_err(|e| MucError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| MucError::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MucError::io(path, std::io::Error::other(e)))?;
    r.deserialize().map(|row| row.map_err(|e| MucError::Format(e.to_string()))).collect()
}
