use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use crate::autograd::{Graph, Trainable};
use crate::error::{Error, Result};
use crate::evalmetrics::Evaluation;
use crate::geometry::RigConfig;
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, ParamStore};
use crate::synthio::{iterate_split, mix_seed, Batch, Dataset, Split};

use super::checkpoint::{
    best_name, checkpoint_name, latest_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TrainingState,
    CHECKPOINT_FORMAT,
};
use super::config::ExperimentConfig;
use super::model::{forward, init_model, stage_loss, EstimatorInput, ViewOutputs, ESTIMATOR, LIFTER, REFINER};
use super::{check_dataset, open_dataset, write_metrics, MetricsEntry};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the most advanced matching checkpoint in the output
    /// directory, if any.
    pub resume: bool,
    /// Stop once `(stage, epoch)` has been checkpointed.
    pub stop_after: Option<(u8, usize)>,
    /// A stage-1 checkpoint to take the estimator from instead of training it.
    pub stage1_from: Option<PathBuf>,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub metrics: Vec<MetricsEntry>,
    /// `final/` under the output directory, once all stages completed.
    pub final_checkpoint: Option<PathBuf>,
}

fn stages(cfg: &ExperimentConfig) -> Vec<u8> {
    if cfg.training.identity_refiner {
        vec![1, 3]
    } else {
        vec![1, 2, 3]
    }
}

fn estimator_trains(cfg: &ExperimentConfig, stage: u8) -> bool {
    match stage {
        1 => true,
        2 => cfg.training.joint_estimator,
        _ => cfg.training.train_estimator_end_to_end,
    }
}

fn trainable(cfg: &ExperimentConfig, stage: u8) -> Trainable {
    let mut p = Vec::new();
    if estimator_trains(cfg, stage) {
        p.push(format!("{ESTIMATOR}."));
    }
    if stage >= 2 && !cfg.training.identity_refiner {
        p.push(format!("{REFINER}."));
    }
    if stage == 3 {
        p.push(format!("{LIFTER}."));
    }
    Trainable::Prefixes(p)
}

/// Frame indices of `split` used for validation.
pub(crate) fn val_indices(cfg: &ExperimentConfig, ds: &Dataset, split: Split) -> Vec<usize> {
    let n = ds.len(split);
    let cap = cfg.training.max_val_frames;
    (0..if cap > 0 { n.min(cap) } else { n }).collect()
}

/// Runs the (frozen) estimator over `indices` of `split`, one stacked set per
/// view.
pub(crate) fn cache_outputs(
    ps: &ParamStore,
    cfg: &ExperimentConfig,
    rig: &RigConfig,
    ds: &Dataset,
    split: Split,
    indices: &[usize],
) -> Result<Vec<ViewOutputs>> {
    let views = cfg.views.views();
    let mut chunks: Vec<Vec<ViewOutputs>> = vec![Vec::new(); views.len()];
    for idx in indices.chunks(cfg.training.eval_batch_size) {
        let batch = ds.load_batch(split, idx, &views)?;
        let mut g = Graph::inference();
        let fw = forward(&mut g, ps, cfg, rig, EstimatorInput::Images(&batch.images), 1)?;
        for (c, o) in chunks.iter_mut().zip(&fw.outputs) {
            c.push(ViewOutputs::from_graph(&g, o));
        }
    }
    chunks.iter().map(|c| ViewOutputs::concat(c)).collect()
}

/// Validation metrics of the model through `stage`.
#[derive(Clone, Debug, Default)]
pub(crate) struct StageEval {
    pub initial: Evaluation,
    pub refined: Evaluation,
    /// Final poses and refined heatmaps.
    pub report: Evaluation,
}

/// Runs the model over `indices` of `split` and accumulates metrics.
pub(crate) fn run_eval(
    ps: &ParamStore,
    cfg: &ExperimentConfig,
    rig: &RigConfig,
    ds: &Dataset,
    split: Split,
    indices: &[usize],
    stage: u8,
    cache: Option<&[ViewOutputs]>,
) -> Result<StageEval> {
    let views = cfg.views.views();
    let mut ev = StageEval::default();
    for (chunk_no, idx) in indices.chunks(cfg.training.eval_batch_size).enumerate() {
        let batch = ds.load_batch(split, idx, &views)?;
        let mut g = Graph::inference();
        let cached;
        let input = match cache {
            Some(c) => {
                let start = chunk_no * cfg.training.eval_batch_size;
                let rows: Vec<usize> = (start..start + idx.len()).collect();
                cached = c.iter().map(|v| v.gather(&rows)).collect::<Result<Vec<_>>>()?;
                EstimatorInput::Cached(&cached)
            }
            None => EstimatorInput::Images(&batch.images),
        };
        let fw = forward(&mut g, ps, cfg, rig, input, stage)?;
        for (k, &view) in views.iter().enumerate() {
            ev.initial.add_heatmaps(view, g.value(fw.outputs[k].heatmaps), &batch.heatmaps[k])?;
            ev.refined.add_heatmaps(view, g.value(fw.refined[k]), &batch.heatmaps[k])?;
            ev.report.add_heatmaps(view, g.value(fw.refined[k]), &batch.heatmaps[k])?;
        }
        if let Some((_, last)) = fw.poses {
            ev.report.add_poses(g.value(last), &batch.poses, &batch.actions, &batch.identities)?;
        }
    }
    Ok(ev)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a Dataset,
    rig: RigConfig,
    out: PathBuf,
    hash: String,
    metrics: Vec<MetricsEntry>,
    lineage: Vec<String>,
}

impl Run<'_> {
    fn header(&self, state: TrainingState) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: self.hash.clone(),
            stage1_hash: self.cfg.stage1_hash(),
            dataset_config_hash: self.ds.manifest.config_hash.clone(),
            rig_hash: self.ds.manifest.rig_hash.clone(),
            config: self.cfg.clone(),
            state,
            lineage: self.lineage.clone(),
            metrics: self.metrics.clone(),
        }
    }

    fn checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    fn train_step(&self, ps: &mut ParamStore, opt: &mut AdamW, stage: u8, batch: &Batch, cached: Option<&[ViewOutputs]>, lr: f64, step: u64) -> Result<f64> {
        let mut g = Graph::with_trainable(trainable(self.cfg, stage));
        let input = match cached {
            Some(c) => EstimatorInput::Cached(c),
            None => EstimatorInput::Images(&batch.images),
        };
        let fw = forward(&mut g, ps, self.cfg, &self.rig, input, stage)?;
        let loss = stage_loss(&mut g, self.cfg, stage, &fw, &batch.heatmaps, &batch.poses)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { stage, step });
        }
        let mut grads = g.backward(loss)?.params(&g);
        if grads.values().any(|t| !t.all_finite()) {
            return Err(Error::NonFiniteLoss { stage, step });
        }
        clip_grad_norm(&mut grads, self.cfg.schedule(stage).max_grad_norm);
        opt.update(ps, &grads, lr);
        Ok(value)
    }
}

/// Trains the stages of `cfg` in order, checkpointing every epoch, and
/// leaves the best-validation weights of the last stage in `out/final`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let ds = open_dataset(cfg)?;
    train_with(cfg, &ds, opts)
}

/// [`train`] on an already opened dataset.
pub fn train_with(cfg: &ExperimentConfig, ds: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolved()?;
    check_dataset(&cfg, ds)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let cfg_path = cfg.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut run = Run {
        cfg: &cfg,
        ds,
        rig: ds.manifest.rig.clone(),
        out: cfg.out.clone(),
        hash: cfg.hash(),
        metrics: Vec::new(),
        lineage: Vec::new(),
    };
    let mut params = init_model(&cfg)?;
    let mut resumed: Option<(TrainingState, AdamW)> = None;
    if opts.resume {
        if let Some(dir) = latest_checkpoint(&run.checkpoints(), &run.hash)? {
            let ck = load_checkpoint(&dir, AdamWConfig::default())?;
            params = ck.params;
            run.metrics = ck.header.metrics;
            run.lineage = ck.header.lineage;
            let mut opt = ck.optimizer;
            opt.config.weight_decay = cfg.schedule(ck.header.state.stage).weight_decay;
            resumed = Some((ck.header.state, opt));
        }
    }
    let mut skip_stage1 = false;
    if let (Some(src), None) = (&opts.stage1_from, &resumed) {
        let ck = load_checkpoint(src, AdamWConfig::default())?;
        let h = &ck.header;
        if h.stage1_hash != cfg.stage1_hash() {
            return Err(Error::HashMismatch {
                what: format!("stage-1 setup of {}", src.display()),
                expected: cfg.stage1_hash(),
                found: h.stage1_hash.clone(),
            });
        }
        check_header_dataset(h, ds)?;
        for (k, t) in ck.params.iter().filter(|(k, _)| k.starts_with(&format!("{ESTIMATOR}."))) {
            params.insert(k.clone(), t.clone());
        }
        run.metrics = h.metrics.iter().filter(|m| m.stage == 1).cloned().collect();
        run.lineage = h.lineage.clone();
        run.lineage.push(src.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        skip_stage1 = true;
    }
    write_metrics(&run.out, &run.metrics)?;

    for stage in stages(&cfg) {
        if stage == 1 && skip_stage1 {
            continue;
        }
        if resumed.as_ref().is_some_and(|(s, _)| s.stage > stage) {
            continue;
        }
        let sched = cfg.schedule(stage).clone();
        let (mut state, mut opt) = match resumed.take() {
            Some(r) => r,
            None => (
                TrainingState { stage, epoch: 0, step: 0, best_metric: None, best_epoch: None },
                AdamW::new(AdamWConfig { weight_decay: sched.weight_decay, ..AdamWConfig::default() }),
            ),
        };
        let cached = !estimator_trains(&cfg, stage);
        let val_idx = val_indices(&cfg, ds, Split::Val);
        let (train_cache, val_cache) = if cached {
            let all: Vec<usize> = (0..ds.len(Split::Train)).collect();
            (
                Some(cache_outputs(&params, &cfg, &run.rig, ds, Split::Train, &all)?),
                Some(cache_outputs(&params, &cfg, &run.rig, ds, Split::Val, &val_idx)?),
            )
        } else {
            (None, None)
        };
        let views = cfg.views.views();
        while state.epoch < sched.epochs {
            let started = Instant::now();
            let epoch = state.epoch;
            let lr = sched.learning_rate_at(epoch);
            let mut order = iterate_split(
                ds.len(Split::Train),
                sched.batch_size,
                Some(mix_seed(&[cfg.seed, stage as u64, epoch as u64])),
            )?;
            if cfg.training.max_train_batches > 0 {
                order.truncate(cfg.training.max_train_batches);
            }
            let mut loss_sum = 0.0;
            for idx in &order {
                let batch = ds.load_batch(Split::Train, idx, &views)?;
                let gathered = match &train_cache {
                    Some(c) => Some(c.iter().map(|v| v.gather(idx)).collect::<Result<Vec<_>>>()?),
                    None => None,
                };
                loss_sum += run.train_step(&mut params, &mut opt, stage, &batch, gathered.as_deref(), lr, state.step)?;
                state.step += 1;
            }
            let ev = run_eval(&params, &cfg, &run.rig, ds, Split::Val, &val_idx, stage, val_cache.as_deref())?;
            let entry = MetricsEntry::new(stage, epoch + 1, state.step, lr, loss_sum / order.len().max(1) as f64, &ev)?;
            let metric = entry.selection_metric();
            let improved = state.best_metric.is_none_or(|b| metric < b);
            if improved {
                state.best_metric = Some(metric);
                state.best_epoch = Some(epoch + 1);
            }
            state.epoch += 1;
            if opts.progress {
                eprintln!("{} ({:.1}s)", entry.summary(), started.elapsed().as_secs_f64());
            }
            run.metrics.push(entry);
            write_metrics(&run.out, &run.metrics)?;
            let name = checkpoint_name(stage, state.epoch);
            let header = run.header(state.clone());
            save_checkpoint(&run.checkpoints().join(&name), &header, &params, &opt)?;
            if improved {
                save_checkpoint(&run.checkpoints().join(best_name(stage)), &header, &params, &opt)?;
            }
            if opts.stop_after == Some((stage, state.epoch)) {
                return Ok(TrainOutcome { out: run.out.clone(), metrics: run.metrics.clone(), final_checkpoint: None });
            }
        }
        let best = run.checkpoints().join(best_name(stage));
        if best.exists() {
            params = load_checkpoint(&best, AdamWConfig::default())?.params;
        }
        run.lineage.push(best_name(stage));
    }
    let final_dir = run.out.join("final");
    let state = TrainingState { stage: 3, epoch: cfg.stage3.epochs, step: 0, best_metric: None, best_epoch: None };
    save_checkpoint(&final_dir, &run.header(state), &params, &AdamW::new(AdamWConfig::default()))?;
    Ok(TrainOutcome { out: run.out.clone(), metrics: run.metrics, final_checkpoint: Some(final_dir) })
}

pub(crate) fn check_header_dataset(h: &CheckpointHeader, ds: &Dataset) -> Result<()> {
    if h.dataset_config_hash != ds.manifest.config_hash {
        return Err(Error::HashMismatch {
            what: "dataset configuration".into(),
            expected: h.dataset_config_hash.clone(),
            found: ds.manifest.config_hash.clone(),
        });
    }
    if h.rig_hash != ds.manifest.rig_hash {
        return Err(Error::HashMismatch {
            what: "dataset rig".into(),
            expected: h.rig_hash.clone(),
            found: ds.manifest.rig_hash.clone(),
        });
    }
    Ok(())
}
