use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalmetrics::{EvalReport, Evaluation};
use crate::synthio::{Dataset, Split};

use super::checkpoint::load_checkpoint;
use super::config::ViewSubset;
use super::train::{check_header_dataset, run_eval};
use crate::nn::AdamWConfig;

/// Evaluates a trained checkpoint on a whole split. `views`, when given,
/// must be the subset the checkpoint was trained on.
pub fn evaluate(checkpoint: &Path, ds: &Dataset, split: Split, views: Option<ViewSubset>) -> Result<Evaluation> {
    let ck = load_checkpoint(checkpoint, AdamWConfig::default())?;
    let h = &ck.header;
    check_header_dataset(h, ds)?;
    if h.config.hash() != h.config_hash {
        return Err(Error::HashMismatch {
            what: format!("configuration stored in {}", checkpoint.display()),
            expected: h.config_hash.clone(),
            found: h.config.hash(),
        });
    }
    if let Some(v) = views {
        if v != h.config.views {
            return Err(Error::Config(format!("checkpoint was trained on {} views, not {v}", h.config.views)));
        }
    }
    if h.state.stage != 3 {
        return Err(Error::Config(format!("checkpoint {} stops at stage {}", checkpoint.display(), h.state.stage)));
    }
    let indices: Vec<usize> = (0..ds.len(split)).collect();
    let ev = run_eval(&ck.params, &h.config, &ds.manifest.rig, ds, split, &indices, 3, None)?;
    Ok(ev.report)
}

/// Scores the ground truth against itself; a check of the evaluation path.
pub fn evaluate_ground_truth(ds: &Dataset, split: Split, views: ViewSubset) -> Result<Evaluation> {
    let views = views.views();
    let mut ev = Evaluation::new();
    let indices: Vec<usize> = (0..ds.len(split)).collect();
    for idx in indices.chunks(64) {
        let b = ds.load_batch(split, idx, &views)?;
        for (k, &v) in views.iter().enumerate() {
            ev.add_heatmaps(v, &b.heatmaps[k], &b.heatmaps[k])?;
        }
        ev.add_poses(&b.poses, &b.poses, &b.actions, &b.identities)?;
    }
    Ok(ev)
}

/// Writes `<name>.json`, `<name>.txt` and `<name>_samples.csv` into `dir`.
pub fn write_eval(dir: &Path, name: &str, ev: &Evaluation) -> Result<EvalReport> {
    let report = ev.report()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, body) in [
        (format!("{name}.json"), report.to_json()),
        (format!("{name}.txt"), report.to_text()),
        (format!("{name}_samples.csv"), ev.samples_csv()),
    ] {
        let p = dir.join(file);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
