use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalmetrics::{fmt_opt, render_table, EvalReport, VisibilityTable};
use crate::synthio::Action;

use super::ablate::AblationTable;
use super::{read_metrics, MetricsEntry, METRICS_FILE};

/// `(base − value) / base`: positive when `value` improves on `base`.
pub fn relative_improvement(base: f64, value: f64) -> f64 {
    (base - value) / base
}

struct RunArtifacts {
    name: String,
    metrics: Vec<MetricsEntry>,
    test: EvalReport,
    views: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Renders comparison tables over training runs (and ablation directories)
/// into `out/report.txt`, with per-epoch series in `out/loss_curves.csv`.
/// `dataset`, if given, must hold a `visibility.json`.
pub fn report(runs: &[PathBuf], dataset: Option<&Path>, out: &Path) -> Result<String> {
    let mut missing = Vec::new();
    if runs.is_empty() {
        missing.push("at least one run directory".to_string());
    }
    for r in runs {
        if r.join("ablation.json").exists() {
            continue;
        }
        for f in [METRICS_FILE, "config.toml", "eval/test.json"] {
            let p = r.join(f);
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if let Some(d) = dataset {
        let p = d.join("visibility.json");
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let mut trained = Vec::new();
    let mut ablations = Vec::new();
    for r in runs {
        if r.join("ablation.json").exists() {
            ablations.push((run_name(r), read_json::<AblationTable>(&r.join("ablation.json"))?));
            continue;
        }
        let cfg_text = fs::read_to_string(r.join("config.toml")).map_err(|e| Error::io(r.join("config.toml"), e))?;
        let cfg: toml::Table = cfg_text.parse().map_err(|e| Error::Config(format!("{}: {e}", r.display())))?;
        let views = cfg.get("views").and_then(|v| v.as_str()).unwrap_or("?").to_string();
        trained.push(RunArtifacts {
            name: run_name(r),
            metrics: read_metrics(r)?,
            test: read_json(&r.join("eval/test.json"))?,
            views,
        });
    }

    let mut text = String::new();
    if let Some(base) = trained.first() {
        let base_mpjpe = base.test.mpjpe_mm;
        text += "3D pose on the test split (mm)\n";
        let headers: Vec<String> =
            ["run", "views", "MPJPE", "PA-MPJPE", "delta MPJPE"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = trained
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let delta = if i == 0 {
                    "-".to_string()
                } else {
                    format!("{:+.1}%", 100.0 * relative_improvement(base_mpjpe, r.test.mpjpe_mm))
                };
                vec![
                    r.name.clone(),
                    r.views.clone(),
                    format!("{:.2}", r.test.mpjpe_mm),
                    format!("{:.2}", r.test.pa_mpjpe_mm),
                    delta,
                ]
            })
            .collect();
        text += &render_table(&headers, &rows);
        if trained.len() > 1 {
            writeln!(text, "delta: relative MPJPE improvement over `{}`", base.name).expect("string write");
        }

        text += "\nper-joint MPJPE (mm)\n";
        let mut headers = vec!["run".to_string()];
        headers.extend(base.test.groups.iter().map(|g| g.name.clone()));
        let rows: Vec<Vec<String>> = trained
            .iter()
            .map(|r| {
                let mut row = vec![r.name.clone()];
                row.extend(r.test.groups.iter().map(|g| format!("{:.2}", g.mpjpe_mm)));
                row
            })
            .collect();
        text += &render_table(&headers, &rows);

        text += "\nper-action MPJPE (mm)\n";
        let mut headers = vec!["action".to_string()];
        headers.extend(trained.iter().map(|r| r.name.clone()));
        let rows: Vec<Vec<String>> = Action::ALL
            .iter()
            .map(|a| {
                let mut row = vec![a.name().to_string()];
                for r in &trained {
                    let v = r.test.actions.iter().find(|x| x.action == *a).map(|x| x.mpjpe_mm);
                    row.push(fmt_opt(v, 2));
                }
                row
            })
            .collect();
        text += &render_table(&headers, &rows);

        text += "\nheatmaps and pose (MSE x1e-4 / pixel, mm)\n";
        let headers: Vec<String> = ["run", "front MSE", "back MSE", "MPJPE", "PA-MPJPE"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = trained
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    fmt_opt(r.test.heatmap_mse.front, 3),
                    fmt_opt(r.test.heatmap_mse.back, 3),
                    format!("{:.2}", r.test.mpjpe_mm),
                    format!("{:.2}", r.test.pa_mpjpe_mm),
                ]
            })
            .collect();
        text += &render_table(&headers, &rows);
    }
    for (name, table) in &ablations {
        writeln!(text, "\nablation `{name}`").expect("string write");
        text += &table.to_text();
    }
    if let Some(d) = dataset {
        let vis: VisibilityTable = read_json(&d.join("visibility.json"))?;
        text += "\nend-effector visibility\n";
        text += &vis.to_text();
    }

    let mut csv = String::from(
        "run,stage,epoch,steps,learning_rate,train_loss,val_initial_mse,val_refined_mse,val_mpjpe_mm,val_pa_mpjpe_mm\n",
    );
    for r in &trained {
        for m in &r.metrics {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            writeln!(
                csv,
                "{},{},{},{},{:e},{:.6},{},{},{},{}",
                r.name,
                m.stage,
                m.epoch,
                m.steps,
                m.learning_rate,
                m.train_loss,
                opt(m.val_initial_mse.all),
                opt(m.val_refined_mse.as_ref().and_then(|x| x.all)),
                opt(m.val_mpjpe_mm),
                opt(m.val_pa_mpjpe_mm)
            )
            .expect("string write");
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (file, body) in [("report.txt", &text), ("loss_curves.csv", &csv)] {
        let p = out.join(file);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(text)
}
