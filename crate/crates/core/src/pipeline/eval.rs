//! Camera-count sweeps and per-scene metric tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::lbs_forward;
use crate::error::{MucError, Result};
use crate::metrics::{evaluate_body, MetricReport, MetricRow, ProcrustesMode};
use crate::pipeline::model::{FusionMode, FusionModel};
use crate::synth::SceneSample;

/// Metrics of every scene fused from its first `k` views.
pub fn evaluate_scenes(model: &FusionModel, scenes: &[SceneSample], k: usize, mode: FusionMode, procrustes: ProcrustesMode) -> Result<Vec<MetricRow>> {
    scenes
        .iter()
        .map(|s| {
            let gt = lbs_forward(&model.asset, &s.gt_params)?;
            let out = model.infer(s, k, mode)?;
            let report = evaluate_body(&out.body, &gt, &model.asset, procrustes)?;
            Ok(MetricRow { scene_id: s.scene_id.clone(), n_cameras: k, report })
        })
        .collect()
}

pub fn mean_report(model: &FusionModel, scenes: &[SceneSample], k: usize, mode: FusionMode, procrustes: ProcrustesMode) -> Result<MetricReport> {
    let rows = evaluate_scenes(model, scenes, k, mode, procrustes)?;
    MetricReport::mean(&rows.iter().map(|r| r.report).collect::<Vec<_>>())
}

/// Mean metrics at one camera count for the trained model and both ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub full: MetricReport,
    pub jrn_only: MetricReport,
    pub uniform: MetricReport,
}

impl SweepRow {
    pub fn get(&self, mode: FusionMode) -> &MetricReport {
        match mode {
            FusionMode::Full => &self.full,
            FusionMode::JrnOnly => &self.jrn_only,
            FusionMode::Uniform => &self.uniform,
        }
    }
}

pub fn run_eval_sweep(model: &FusionModel, test: &[SceneSample], k_list: &[usize], procrustes: ProcrustesMode) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(MucError::InvalidArgument("empty test set".into()));
    }
    k_list
        .iter()
        .map(|&k| {
            Ok(SweepRow {
                k,
                full: mean_report(model, test, k, FusionMode::Full, procrustes)?,
                jrn_only: mean_report(model, test, k, FusionMode::JrnOnly, procrustes)?,
                uniform: mean_report(model, test, k, FusionMode::Uniform, procrustes)?,
            })
        })
        .collect()
}

const METRIC_NAMES: [&str; 7] = ["mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe", "hand_pa_mpjpe", "hand_pa_mpvpe", "face_pa_mpvpe"];
const MODES: [FusionMode; 3] = [FusionMode::Full, FusionMode::JrnOnly, FusionMode::Uniform];

/// One row per `k`; columns `k` then `{full,jrn_only,uniform}_{metric}`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let err = |e: csv::Error| MucError::Format(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    for m in MODES {
        header.extend(METRIC_NAMES.iter().map(|n| format!("{}_{n}", m.as_str())));
    }
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.k.to_string()];
        for m in MODES {
            rec.extend(r.get(m).as_array().iter().map(|x| x.to_string()));
        }
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| MucError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MucError::Format(e.to_string()))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, sweep_to_csv(rows)?).map_err(|e| MucError::io(path, e))
}
