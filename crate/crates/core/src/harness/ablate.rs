use std::fs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{fmt_opt, render_table};
use crate::refiner::RefinerAblation;
use crate::synthio::Split;

use super::checkpoint::best_name;
use super::config::ExperimentConfig;
use super::eval::{evaluate, write_eval};
use super::open_dataset;
use super::train::{train_with, TrainOptions};

/// The full model followed by the four single-ingredient removals.
pub fn ablation_variants() -> Vec<RefinerAblation> {
    let none = RefinerAblation::default();
    vec![
        none,
        RefinerAblation { no_anchor: true, ..none },
        RefinerAblation { no_mask: true, ..none },
        RefinerAblation { no_embeddings: true, ..none },
        RefinerAblation { no_rgb_embedding: true, ..none },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Heatmap MSE ×1e4 per pixel over front and rear views.
    pub front_mse: Option<f64>,
    pub back_mse: Option<f64>,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Variants whose MPJPE is below the full model's.
    pub beats_full: Vec<String>,
}

impl AblationTable {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let full = rows.iter().find(|r| r.variant == "full").map(|r| r.mpjpe_mm);
        let beats_full = rows
            .iter()
            .filter(|r| r.variant != "full" && full.is_some_and(|f| r.mpjpe_mm < f))
            .map(|r| r.variant.clone())
            .collect();
        Self { rows, beats_full }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises") + "\n"
    }

    pub fn to_text(&self) -> String {
        let headers: Vec<String> =
            ["variant", "front MSE (x1e-4)", "back MSE (x1e-4)", "MPJPE", "PA-MPJPE"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    fmt_opt(r.front_mse, 3),
                    fmt_opt(r.back_mse, 3),
                    format!("{:.2}", r.mpjpe_mm),
                    format!("{:.2}", r.pa_mpjpe_mm),
                ]
            })
            .collect();
        let mut out = render_table(&headers, &rows);
        if self.beats_full.is_empty() {
            out += "full model has the lowest MPJPE\n";
        } else {
            out += &format!("flagged: lower MPJPE than the full model: {}\n", self.beats_full.join(", "));
        }
        out
    }
}

/// Trains and evaluates every variant of [`ablation_variants`] with one
/// shared stage-1 estimator, each under `cfg.out/<variant>`, and writes
/// `ablation.json` and `ablation.txt` into `cfg.out`.
pub fn ablate(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<AblationTable> {
    let ds = open_dataset(cfg)?;
    ablate_with(cfg, &ds, opts)
}

/// [`ablate`] on an already opened dataset.
pub fn ablate_with(cfg: &ExperimentConfig, ds: &crate::synthio::Dataset, opts: &TrainOptions) -> Result<AblationTable> {
    let base = cfg.clone().resolved()?;
    let mut rows = Vec::new();
    let mut stage1 = None;
    for variant in ablation_variants() {
        let mut c = base.clone();
        c.refiner.ablation = variant;
        c.training.identity_refiner = false;
        c.out = base.out.join(variant.label());
        let o = TrainOptions { stage1_from: stage1.clone(), ..opts.clone() };
        let outcome = train_with(&c, ds, &o)?;
        if stage1.is_none() {
            stage1 = Some(outcome.out.join("checkpoints").join(best_name(1)));
        }
        let Some(final_dir) = outcome.final_checkpoint else {
            return Err(Error::Config("ablation runs cannot stop early".into()));
        };
        let ev = evaluate(&final_dir, ds, Split::Test, Some(c.views))?;
        let r = write_eval(&outcome.out.join("eval"), Split::Test.name(), &ev)?;
        rows.push(AblationRow {
            variant: variant.label().to_string(),
            front_mse: r.heatmap_mse.front,
            back_mse: r.heatmap_mse.back,
            mpjpe_mm: r.mpjpe_mm,
            pa_mpjpe_mm: r.pa_mpjpe_mm,
        });
    }
    let table = AblationTable::from_rows(rows);
    for (name, body) in [("ablation.json", table.to_json()), ("ablation.txt", table.to_text())] {
        let p = base.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}
