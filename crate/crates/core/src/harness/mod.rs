//! Experiment configuration, the three training stages with checkpointing
//! and resume, evaluation, the ablation runner and report rendering.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::HeatmapMse;
use crate::synthio::Dataset;

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod model;
mod report;
mod train;

pub use ablate::{ablate, ablate_with, ablation_variants, AblationRow, AblationTable};
pub use checkpoint::{
    best_name, checkpoint_name, latest_checkpoint, load_checkpoint, read_header, save_checkpoint, Checkpoint,
    CheckpointHeader, TrainingState, CHECKPOINT_FORMAT,
};
pub use config::{overlay_toml, parse_over, ExperimentConfig, Scale, StageSchedule, TrainingFlags, ViewSubset};
pub use eval::{evaluate, evaluate_ground_truth, write_eval};
pub use model::{forward, init_model, stage_loss, EstimatorInput, Forward, ViewOutputs, ESTIMATOR, LIFTER, REFINER};
pub use report::{relative_improvement, report};
pub use train::{train, train_with, TrainOptions, TrainOutcome};

/// Overrides the dataset directory of every experiment configuration.
pub const DATA_ROOT_ENV: &str = "REARPOSE_DATA_ROOT";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of the metrics log: a finished epoch and its validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub stage: u8,
    /// One-based epoch within the stage.
    pub epoch: usize,
    /// Optimiser steps taken in the stage so far.
    pub steps: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_initial_mse: HeatmapMse,
    pub val_refined_mse: Option<HeatmapMse>,
    pub val_mpjpe_mm: Option<f64>,
    pub val_pa_mpjpe_mm: Option<f64>,
}

impl MetricsEntry {
    pub(crate) fn new(stage: u8, epoch: usize, steps: u64, lr: f64, train_loss: f64, ev: &train::StageEval) -> Result<Self> {
        let (mpjpe, pa) = if stage >= 3 {
            let r = ev.report.report()?;
            (Some(r.mpjpe_mm), Some(r.pa_mpjpe_mm))
        } else {
            (None, None)
        };
        Ok(Self {
            stage,
            epoch,
            steps,
            learning_rate: lr,
            train_loss,
            val_initial_mse: ev.initial.heatmap_mse(),
            val_refined_mse: (stage >= 2).then(|| ev.refined.heatmap_mse()),
            val_mpjpe_mm: mpjpe,
            val_pa_mpjpe_mm: pa,
        })
    }

    /// Lower is better: initial heatmap MSE in stage 1, refined heatmap MSE
    /// in stage 2, MPJPE in stage 3.
    pub fn selection_metric(&self) -> f64 {
        let all = |m: &HeatmapMse| m.all.unwrap_or(f64::INFINITY);
        match self.stage {
            1 => all(&self.val_initial_mse),
            2 => self.val_refined_mse.as_ref().map_or(f64::INFINITY, all),
            _ => self.val_mpjpe_mm.unwrap_or(f64::INFINITY),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "stage {} epoch {} lr {:.1e} loss {:.5} val initial MSE {:.3}",
            self.stage,
            self.epoch,
            self.learning_rate,
            self.train_loss,
            self.val_initial_mse.all.unwrap_or(f64::NAN)
        );
        if let Some(r) = &self.val_refined_mse {
            s += &format!(" refined MSE {:.3}", r.all.unwrap_or(f64::NAN));
        }
        if let (Some(m), Some(p)) = (self.val_mpjpe_mm, self.val_pa_mpjpe_mm) {
            s += &format!(" MPJPE {m:.2} PA-MPJPE {p:.2}");
        }
        s
    }
}

pub fn write_metrics(dir: &Path, entries: &[MetricsEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text += &serde_json::to_string(e).expect("entry serialises");
        text.push('\n');
    }
    let path = dir.join(METRICS_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsEntry>> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Json { path: path.clone(), source: e }))
        .collect()
}

/// The dataset directory of `cfg`, or the one named by
/// [`DATA_ROOT_ENV`] when set.
pub fn dataset_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.dataset.clone())
}

pub fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::open(&dataset_root(cfg), None)
}

/// Refuses a dataset whose image or heatmap size does not fit the models.
pub fn check_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let dc = &ds.manifest.config;
    if dc.rig.image_size != cfg.estimator.image_size || dc.render.heatmap_size != cfg.estimator.heatmap_size() {
        return Err(Error::Config(format!(
            "dataset images {:?} / heatmaps {:?} do not fit estimator input {:?} / output {:?}",
            dc.rig.image_size,
            dc.render.heatmap_size,
            cfg.estimator.image_size,
            cfg.estimator.heatmap_size()
        )));
    }
    Ok(())
}
