//! MPJPE and Procrustes-aligned MPJPE, per-joint, per-group and per-action
//! tables, heatmap MSE and end-effector visibility statistics.
//!
//! Poses are metres internally; every reported number is millimetres.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{joint_index, View, JOINT_NAMES, NUM_JOINTS};
use crate::synthio::Action;
use crate::tensor::Tensor;

mod visibility;

pub use visibility::{visibility_report, visibility_row, EndEffectorRates, VisibilityRow, VisibilityTable, END_EFFECTORS};

pub const MM_PER_M: f64 = 1000.0;
/// Heatmap MSE is reported in units of 1e-4 per pixel.
pub const HEATMAP_MSE_SCALE: f64 = 1e4;

fn pose_count(pred: &Tensor, gt: &Tensor) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    if pred.rank() != 3 || pred.dim(1) != NUM_JOINTS || pred.dim(2) != 3 {
        return shape_err(format!("poses must be [N, {NUM_JOINTS}, 3], got {:?}", pred.shape()));
    }
    if pred.dim(0) == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(pred.dim(0))
}

fn points(t: &Tensor, n: usize) -> Vec<Point3<f64>> {
    let d = &t.data()[n * NUM_JOINTS * 3..(n + 1) * NUM_JOINTS * 3];
    d.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// Per-sample, per-joint Euclidean errors in metres.
pub fn joint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<[f64; NUM_JOINTS]>> {
    let n = pose_count(pred, gt)?;
    Ok((0..n)
        .map(|i| {
            let (p, g) = (points(pred, i), points(gt, i));
            std::array::from_fn(|j| (p[j] - g[j]).norm())
        })
        .collect())
}

/// Mean per-joint position error, millimetres.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let errs = joint_errors(pred, gt)?;
    let total: f64 = errs.iter().flat_map(|e| e.iter()).sum();
    Ok(total / (errs.len() * NUM_JOINTS) as f64 * MM_PER_M)
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }
}

/// Relative size below which the second principal extent of a point set
/// counts as zero (the set is collinear).
const COLLINEAR_RATIO: f64 = 1e-6;

/// Least-squares similarity transform taking `pred` onto `gt`, with
/// reflections excluded. Fails if `pred` is coincident or collinear.
pub fn procrustes(pred: &[Point3<f64>], gt: &[Point3<f64>]) -> std::result::Result<Similarity, String> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(format!("need ≥ 3 matched points, got {} and {}", pred.len(), gt.len()));
    }
    let k = pred.len() as f64;
    let mp = pred.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / k;
    let mg = gt.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / k;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        let (x, y) = (p.coords - mp, g.coords - mg);
        cov += x * y.transpose();
        spread += x * x.transpose();
    }
    let var = spread.trace();
    let mut extents: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    extents.sort_by(|a, b| b.total_cmp(a));
    if !(var > 1e-18) {
        return Err("prediction joints coincide".into());
    }
    if extents[1] <= COLLINEAR_RATIO * COLLINEAR_RATIO * extents[0] {
        return Err("prediction joints are collinear".into());
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("3 values");
        d[smallest] = -1.0;
    }
    let rotation = v_t.transpose() * Matrix3::from_diagonal(&d) * u.transpose();
    let scale = sv.component_mul(&d).sum() / var;
    let translation = mg - scale * (rotation * mp);
    Ok(Similarity { scale, rotation, translation })
}

/// Sum of squared distances between matched points.
pub fn squared_residual(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum()
}

/// Each predicted pose aligned to its ground truth, `[N, 16, 3]`.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let n = pose_count(pred, gt)?;
    let mut out = Vec::with_capacity(pred.len());
    for i in 0..n {
        let (p, g) = (points(pred, i), points(gt, i));
        let sim = procrustes(&p, &g).map_err(|reason| Error::Degenerate { sample: i, reason })?;
        for q in &p {
            out.extend_from_slice(sim.apply(q).coords.as_slice());
        }
    }
    Tensor::new(pred.shape(), out)
}

/// MPJPE after per-sample similarity alignment, millimetres.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

/// A named set of skeleton joints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<String>,
}

impl JointGroup {
    pub fn new(name: &str, joints: &[&str]) -> Self {
        Self { name: name.to_string(), joints: joints.iter().map(|s| s.to_string()).collect() }
    }
}

/// The per-joint table layout: single joints or left/right pairs, then the
/// upper body (head to hands), lower body (upper legs to toes) and all.
pub fn default_groups() -> Vec<JointGroup> {
    let upper = &JOINT_NAMES[..8];
    let lower = &JOINT_NAMES[8..];
    vec![
        JointGroup::new("head", &["head"]),
        JointGroup::new("neck", &["neck"]),
        JointGroup::new("arms", &["left_arm", "right_arm"]),
        JointGroup::new("forearms", &["left_forearm", "right_forearm"]),
        JointGroup::new("hands", &["left_hand", "right_hand"]),
        JointGroup::new("upper legs", &["left_upper_leg", "right_upper_leg"]),
        JointGroup::new("legs", &["left_leg", "right_leg"]),
        JointGroup::new("feet", &["left_foot", "right_foot"]),
        JointGroup::new("toes", &["left_toe", "right_toe"]),
        JointGroup::new("upper body", upper),
        JointGroup::new("lower body", lower),
        JointGroup::new("all", &JOINT_NAMES),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub name: String,
    pub mpjpe_mm: f64,
}

/// Mean of the per-joint errors over each group's joints.
pub fn per_group_report(per_joint: &[f64; NUM_JOINTS], groups: &[JointGroup]) -> Result<Vec<GroupRow>> {
    groups
        .iter()
        .map(|g| {
            if g.joints.is_empty() {
                return Err(Error::Config(format!("joint group `{}` is empty", g.name)));
            }
            let idx: Vec<usize> = g.joints.iter().map(|n| joint_index(n)).collect::<Result<_>>()?;
            let mean = idx.iter().map(|&j| per_joint[j]).sum::<f64>() / idx.len() as f64;
            Ok(GroupRow { name: g.name.clone(), mpjpe_mm: mean })
        })
        .collect()
}

/// Errors of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub index: usize,
    pub action: Action,
    pub identity: u32,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub joints_mm: [f64; NUM_JOINTS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub joint: String,
    pub mpjpe_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: Action,
    pub samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

/// Mean squared heatmap error per pixel, ×1e4; `None` when no view of that
/// side was evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMse {
    pub front: Option<f64>,
    pub back: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub joints: Vec<JointRow>,
    pub groups: Vec<GroupRow>,
    pub actions: Vec<ActionRow>,
    pub heatmap_mse: HeatmapMse,
}

/// Incremental evaluation over batches; the report is a pure function of
/// the sequence of added batches.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    samples: Vec<SampleErrors>,
    /// `(sum of squared errors, element count)` for front and rear views.
    heatmaps: [(f64, usize); 2],
}

impl Evaluation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_poses(&mut self, pred: &Tensor, gt: &Tensor, actions: &[Action], identities: &[u32]) -> Result<()> {
        let n = pose_count(pred, gt)?;
        if actions.len() != n || identities.len() != n {
            return shape_err(format!("{n} poses but {} actions and {} identities", actions.len(), identities.len()));
        }
        let errs = joint_errors(pred, gt)?;
        let base = self.samples.len();
        let aligned = procrustes_align(pred, gt).map_err(|e| match e {
            Error::Degenerate { sample, reason } => Error::Degenerate { sample: base + sample, reason },
            e => e,
        })?;
        let pa_errs = joint_errors(&aligned, gt)?;
        for i in 0..n {
            let joints_mm = errs[i].map(|e| e * MM_PER_M);
            self.samples.push(SampleErrors {
                index: base + i,
                action: actions[i],
                identity: identities[i],
                mpjpe_mm: joints_mm.iter().sum::<f64>() / NUM_JOINTS as f64,
                pa_mpjpe_mm: pa_errs[i].iter().sum::<f64>() / NUM_JOINTS as f64 * MM_PER_M,
                joints_mm,
            });
        }
        Ok(())
    }

    pub fn add_heatmaps(&mut self, view: View, pred: &Tensor, gt: &Tensor) -> Result<()> {
        if pred.shape() != gt.shape() {
            return shape_err(format!("heatmaps {:?} vs {:?}", pred.shape(), gt.shape()));
        }
        let sq: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let slot = &mut self.heatmaps[usize::from(!view.is_front())];
        slot.0 += sq;
        slot.1 += pred.len();
        Ok(())
    }

    pub fn samples(&self) -> &[SampleErrors] {
        &self.samples
    }

    pub fn heatmap_mse(&self) -> HeatmapMse {
        let hm = |(sum, count): (f64, usize)| (count > 0).then(|| sum / count as f64 * HEATMAP_MSE_SCALE);
        let [f, b] = self.heatmaps;
        HeatmapMse { front: hm(f), back: hm(b), all: hm((f.0 + b.0, f.1 + b.1)) }
    }

    pub fn report(&self) -> Result<EvalReport> {
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut per_joint = [0.0; NUM_JOINTS];
        for s in &self.samples {
            for (acc, e) in per_joint.iter_mut().zip(&s.joints_mm) {
                *acc += e;
            }
        }
        per_joint.iter_mut().for_each(|v| *v /= n as f64);
        let mut by_action: BTreeMap<Action, (usize, f64, f64)> = BTreeMap::new();
        for s in &self.samples {
            let e = by_action.entry(s.action).or_default();
            e.0 += 1;
            e.1 += s.mpjpe_mm;
            e.2 += s.pa_mpjpe_mm;
        }
        Ok(EvalReport {
            samples: n,
            mpjpe_mm: self.samples.iter().map(|s| s.mpjpe_mm).sum::<f64>() / n as f64,
            pa_mpjpe_mm: self.samples.iter().map(|s| s.pa_mpjpe_mm).sum::<f64>() / n as f64,
            joints: JOINT_NAMES
                .iter()
                .zip(per_joint)
                .map(|(name, e)| JointRow { joint: name.to_string(), mpjpe_mm: e })
                .collect(),
            groups: per_group_report(&per_joint, &default_groups())?,
            actions: Action::ALL
                .iter()
                .filter_map(|a| by_action.get(a).map(|&(c, m, p)| (a, c, m, p)))
                .map(|(&action, c, m, p)| ActionRow {
                    action,
                    samples: c,
                    mpjpe_mm: m / c as f64,
                    pa_mpjpe_mm: p / c as f64,
                })
                .collect(),
            heatmap_mse: self.heatmap_mse(),
        })
    }

    /// One row per sample: identifiers, MPJPE, PA-MPJPE and per-joint errors.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,action,identity,mpjpe_mm,pa_mpjpe_mm");
        for name in JOINT_NAMES {
            write!(out, ",{name}_mm").expect("string write");
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{},{},{},{:.6},{:.6}", s.index, s.action.name(), s.identity, s.mpjpe_mm, s.pa_mpjpe_mm)
                .expect("string write");
            for e in &s.joints_mm {
                write!(out, ",{e:.6}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Plain-text table with right-aligned columns under a left-aligned first
/// column.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate().take(cols) {
            let pad = width[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    let rule: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

pub fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "samples: {}", self.samples).expect("string write");
        writeln!(out, "MPJPE: {:.2} mm", self.mpjpe_mm).expect("string write");
        writeln!(out, "PA-MPJPE: {:.2} mm", self.pa_mpjpe_mm).expect("string write");
        writeln!(
            out,
            "heatmap MSE (x1e-4 / pixel): front {}, back {}",
            fmt_opt(self.heatmap_mse.front, 3),
            fmt_opt(self.heatmap_mse.back, 3)
        )
        .expect("string write");
        out.push_str("\nper-joint MPJPE (mm)\n");
        let mut headers = vec!["metric".to_string()];
        headers.extend(self.groups.iter().map(|g| g.name.clone()));
        let mut row = vec!["MPJPE".to_string()];
        row.extend(self.groups.iter().map(|g| format!("{:.2}", g.mpjpe_mm)));
        out.push_str(&render_table(&headers, &[row]));
        out.push_str("\nper-action (mm)\n");
        let headers: Vec<String> = ["action", "samples", "MPJPE", "PA-MPJPE"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = self
            .actions
            .iter()
            .map(|a| {
                vec![
                    a.action.name().to_string(),
                    a.samples.to_string(),
                    format!("{:.2}", a.mpjpe_mm),
                    format!("{:.2}", a.pa_mpjpe_mm),
                ]
            })
            .collect();
        out.push_str(&render_table(&headers, &rows));
        out
    }
}

#[cfg(test)]
mod tests;
