use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::render_table;
use crate::error::Result;
use crate::geometry::{joint_visibility, RigConfig, View, NUM_HEATMAP_JOINTS};
use crate::synthio::{Dataset, IdentityParams, Split};

/// Skeleton indices of the reported end-effectors: left/right hand, then
/// left/right foot.
pub const END_EFFECTORS: [usize; 4] = [6, 7, 12, 13];

/// Fraction of frames in which each end-effector is visible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorRates {
    pub left_hand: f64,
    pub right_hand: f64,
    pub left_foot: f64,
    pub right_foot: f64,
}

impl EndEffectorRates {
    pub fn hands(&self) -> f64 {
        0.5 * (self.left_hand + self.right_hand)
    }

    pub fn feet(&self) -> f64 {
        0.5 * (self.left_foot + self.right_foot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityRow {
    pub label: String,
    pub front_rear_distance: f64,
    pub frames: usize,
    pub rates: BTreeMap<View, EndEffectorRates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityTable {
    pub rows: Vec<VisibilityRow>,
}

/// Rates from per-frame heatmap-joint visibility flags (heatmap joint `c`
/// is skeleton joint `c + 1`).
pub fn visibility_row(
    label: &str,
    front_rear_distance: f64,
    frames: &[BTreeMap<View, [bool; NUM_HEATMAP_JOINTS]>],
) -> VisibilityRow {
    let mut counts: BTreeMap<View, [usize; 4]> = BTreeMap::new();
    for f in frames {
        for (&view, flags) in f {
            let c = counts.entry(view).or_default();
            for (k, &j) in END_EFFECTORS.iter().enumerate() {
                c[k] += usize::from(flags[j - 1]);
            }
        }
    }
    let n = frames.len().max(1) as f64;
    let rates = counts
        .into_iter()
        .map(|(view, c)| {
            let r = EndEffectorRates {
                left_hand: c[0] as f64 / n,
                right_hand: c[1] as f64 / n,
                left_foot: c[2] as f64 / n,
                right_foot: c[3] as f64 / n,
            };
            (view, r)
        })
        .collect();
    VisibilityRow { label: label.to_string(), front_rear_distance, frames: frames.len(), rates }
}

/// End-effector visibility over one split. The first row uses the stored
/// flags; each entry of `front_rear_distances` adds a row recomputed from
/// the ground-truth poses with the rig's front-rear distance replaced.
pub fn visibility_report(dataset: &Dataset, split: Split, front_rear_distances: &[f64]) -> Result<VisibilityTable> {
    let manifest = &dataset.manifest;
    let n = dataset.len(split);
    let mut stored = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let rec = dataset.load(split, i, &View::ALL)?;
        stored.push(rec.views.iter().map(|(&v, r)| (v, r.visibility)).collect());
        poses.push((rec.gt_pose, rec.identity_id));
    }
    let mut rows = vec![visibility_row("dataset", manifest.rig.front_rear_distance, &stored)];
    let mut bodies = BTreeMap::new();
    for &d in front_rear_distances {
        let mut params = manifest.config.rig.clone();
        params.front_rear_distance = d;
        let rig = RigConfig::from_params(&params)?;
        let frames: Vec<_> = poses
            .iter()
            .map(|(pose, id)| {
                let body = bodies.entry(*id).or_insert_with(|| IdentityParams::sample(*id, manifest.seed).body());
                View::ALL
                    .into_iter()
                    .map(|v| (v, std::array::from_fn(|c| joint_visibility(&rig, pose, body, v, c + 1))))
                    .collect()
            })
            .collect();
        rows.push(visibility_row(&format!("D-FR {:.0} cm", d * 100.0), d, &frames));
    }
    Ok(VisibilityTable { rows })
}

impl VisibilityTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    /// One row per rig variant, hand and foot percentages per view.
    pub fn to_text(&self) -> String {
        let mut headers = vec!["rig".to_string()];
        for v in View::ALL {
            headers.push(format!("{v} hands"));
            headers.push(format!("{v} feet"));
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.label.clone()];
                for v in View::ALL {
                    match r.rates.get(&v) {
                        Some(e) => {
                            row.push(format!("{:.1}%", e.hands() * 100.0));
                            row.push(format!("{:.1}%", e.feet() * 100.0));
                        }
                        None => row.extend(["-".to_string(), "-".to_string()]),
                    }
                }
                row
            })
            .collect();
        render_table(&headers, &rows)
    }
}
