use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::MetricsEntry;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::synthio::format::{read_archive, write_archive, DType, Stored};

pub const CHECKPOINT_FORMAT: &str = "rearpose-checkpoint-1";

/// Where training stands; enough, with the weights and optimiser moments,
/// to continue bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub stage: u8,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    /// Optimiser steps taken in `stage`.
    pub step: u64,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub stage1_hash: String,
    pub dataset_config_hash: String,
    pub rig_hash: String,
    pub config: ExperimentConfig,
    pub state: TrainingState,
    /// Names of the checkpoints this one descends from, oldest first.
    pub lineage: Vec<String>,
    /// Metrics log up to and including this checkpoint.
    pub metrics: Vec<MetricsEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

fn store_entries(ps: &ParamStore, prefix: &str) -> Vec<(String, Stored)> {
    ps.iter().map(|(k, t)| (format!("{prefix}{k}"), Stored::new(DType::F64, t.clone()))).collect()
}

/// Writes `header.json`, `weights.egt` and `optimizer.egt` into `dir`,
/// replacing any previous contents only once everything is written.
pub fn save_checkpoint(dir: &Path, header: &CheckpointHeader, params: &ParamStore, optimizer: &AdamW) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let json = serde_json::to_string_pretty(header).expect("header serialises");
    let hp = tmp.join("header.json");
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;
    write_archive(&tmp.join("weights.egt"), &store_entries(params, ""))?;
    let mut opt = store_entries(&optimizer.first, "m/");
    opt.extend(store_entries(&optimizer.second, "v/"));
    opt.push(("step".into(), Stored::new(DType::F64, crate::Tensor::scalar(optimizer.step as f64))));
    write_archive(&tmp.join("optimizer.egt"), &opt)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::corrupt(&path, format!("unknown format `{}`", header.format)));
    }
    Ok(header)
}

pub fn load_checkpoint(dir: &Path, adam: AdamWConfig) -> Result<Checkpoint> {
    let header = read_header(dir)?;
    let mut params = ParamStore::new();
    for (k, s) in read_archive(&dir.join("weights.egt"), |_| true)? {
        params.insert(k, s.tensor);
    }
    let mut optimizer = AdamW::new(adam);
    for (k, s) in read_archive(&dir.join("optimizer.egt"), |_| true)? {
        if let Some(n) = k.strip_prefix("m/") {
            optimizer.first.insert(n, s.tensor);
        } else if let Some(n) = k.strip_prefix("v/") {
            optimizer.second.insert(n, s.tensor);
        } else if k == "step" {
            optimizer.step = s.tensor.item() as u64;
        }
    }
    Ok(Checkpoint { header, params, optimizer })
}

pub fn checkpoint_name(stage: u8, epoch: usize) -> String {
    format!("stage{stage}-epoch{epoch:03}")
}

pub fn best_name(stage: u8) -> String {
    format!("stage{stage}-best")
}

/// The most advanced per-epoch checkpoint under `root` whose configuration
/// hash is `config_hash`.
pub fn latest_checkpoint(root: &Path, config_hash: &str) -> Result<Option<PathBuf>> {
    let Ok(entries) = fs::read_dir(root) else { return Ok(None) };
    let mut best: Option<((u8, usize), PathBuf)> = None;
    for e in entries {
        let e = e.map_err(|err| Error::io(root, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if !name.contains("-epoch") || name.starts_with('.') {
            continue;
        }
        let h = read_header(&e.path())?;
        if h.config_hash != config_hash {
            continue;
        }
        let key = (h.state.stage, h.state.epoch);
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            best = Some((key, e.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
