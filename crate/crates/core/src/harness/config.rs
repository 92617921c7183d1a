use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator2d::Estimator2DConfig;
use crate::geometry::{hex_digest, View};
use crate::lifter3d::LifterConfig;
use crate::refiner::RefinerConfig;

/// The camera combinations a model can be trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewSubset {
    #[serde(rename = "2-front")]
    TwoFront,
    #[serde(rename = "2-front+1-rear-left")]
    TwoFrontRearLeft,
    #[serde(rename = "2-front+1-rear-right")]
    TwoFrontRearRight,
    #[serde(rename = "4-view")]
    FourView,
    #[serde(rename = "2-rear")]
    TwoRear,
}

impl ViewSubset {
    pub const ALL: [ViewSubset; 5] = [
        ViewSubset::TwoFront,
        ViewSubset::TwoFrontRearLeft,
        ViewSubset::TwoFrontRearRight,
        ViewSubset::FourView,
        ViewSubset::TwoRear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewSubset::TwoFront => "2-front",
            ViewSubset::TwoFrontRearLeft => "2-front+1-rear-left",
            ViewSubset::TwoFrontRearRight => "2-front+1-rear-right",
            ViewSubset::FourView => "4-view",
            ViewSubset::TwoRear => "2-rear",
        }
    }

    /// Views in canonical order.
    pub fn views(self) -> Vec<View> {
        use View::*;
        match self {
            ViewSubset::TwoFront => vec![FrontLeft, FrontRight],
            ViewSubset::TwoFrontRearLeft => vec![FrontLeft, FrontRight, RearLeft],
            ViewSubset::TwoFrontRearRight => vec![FrontLeft, FrontRight, RearRight],
            ViewSubset::FourView => View::ALL.to_vec(),
            ViewSubset::TwoRear => vec![RearLeft, RearRight],
        }
    }
}

impl fmt::Display for ViewSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewSubset::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ViewSubset::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown view subset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Optimiser schedule of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Zero-based epochs from which the rate is divided by `decay_factor`
    /// once more.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl StageSchedule {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate / self.decay_factor.powi(decays as i32)
    }

    fn validate(&self, stage: u8) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.max_grad_norm >= 0.0;
        if !ok {
            return Err(Error::Config(format!("stage {stage}: invalid schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale `{s}`"))),
        }
    }
}

/// Switches that change what the stages train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingFlags {
    /// Train the estimator together with the refiner in stage 2.
    pub joint_estimator: bool,
    /// Keep training the estimator in stage 3.
    pub train_estimator_end_to_end: bool,
    /// Skip the refiner: the lifter reads the estimator's features and the
    /// initial heatmaps are reported as refined.
    pub identity_refiner: bool,
    /// Weight of the pose loss against the heatmap losses in stage 3.
    pub pose_loss_weight: f64,
    pub eval_batch_size: usize,
    /// Caps the training batches per epoch; 0 means no cap.
    pub max_train_batches: usize,
    /// Caps the validation frames; 0 means the whole split.
    pub max_val_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub views: ViewSubset,
    pub estimator: Estimator2DConfig,
    pub refiner: RefinerConfig,
    pub lifter: LifterConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    pub training: TrainingFlags,
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        let schedule = |batch_size| StageSchedule {
            epochs: 6,
            batch_size,
            learning_rate: 1e-3,
            weight_decay: 5e-3,
            decay_epochs: vec![4, 5],
            decay_factor: 10.0,
            max_grad_norm: 5.0,
        };
        Self {
            seed,
            dataset: PathBuf::from("data/desk"),
            out: PathBuf::from("runs/desk"),
            views: ViewSubset::FourView,
            estimator: Estimator2DConfig::desk(),
            refiner: RefinerConfig::desk(),
            lifter: LifterConfig::desk(),
            stage1: schedule(16),
            stage2: schedule(16),
            stage3: schedule(8),
            training: TrainingFlags {
                joint_estimator: false,
                train_estimator_end_to_end: false,
                identity_refiner: false,
                pose_loss_weight: 10.0,
                eval_batch_size: 32,
                max_train_batches: 0,
                max_val_frames: 0,
            },
        }
    }

    pub fn paper(seed: u64) -> Self {
        let schedule = |batch_size| StageSchedule {
            epochs: 12,
            batch_size,
            learning_rate: 1e-3,
            weight_decay: 5e-3,
            decay_epochs: vec![8, 10],
            decay_factor: 10.0,
            max_grad_norm: 0.0,
        };
        let desk = Self::desk(seed);
        Self {
            dataset: PathBuf::from("data/paper"),
            out: PathBuf::from("runs/paper"),
            estimator: Estimator2DConfig::paper(),
            refiner: RefinerConfig::paper(),
            lifter: LifterConfig::paper(),
            stage1: schedule(64),
            stage2: schedule(64),
            stage3: schedule(32),
            training: TrainingFlags { train_estimator_end_to_end: true, ..desk.training },
            ..desk
        }
    }

    pub fn base(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(seed),
            Scale::Paper => Self::paper(seed),
        }
    }

    /// Parses TOML over the defaults of `scale`: any key left out keeps its
    /// default. `seed` must be given, in the file or as `seed_override`.
    pub fn from_toml(text: &str, scale: Scale, seed_override: Option<u64>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let seed = match (seed_override, user.get("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => {
                v.as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?
            }
            (None, None) => return Err(Error::Config("config lacks a seed".into())),
        };
        let mut user = user;
        user.insert("seed".into(), toml::Value::Integer(seed as i64));
        overlay_toml(&Self::base(scale, seed), user)?.resolved()
    }

    pub fn load(path: &Path, scale: Scale, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, scale, seed_override)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Copies the view subset and the estimator's output geometry into the
    /// refiner and lifter configs, then validates the whole.
    pub fn resolved(mut self) -> Result<Self> {
        let views = self.views.views();
        let e = &self.estimator;
        e.validate()?;
        self.refiner.views = views.clone();
        self.refiner.joints = e.joints;
        self.refiner.feature_channels = e.feature_channels;
        self.refiner.backbone_channels = e.backbone_channels;
        self.refiner.heatmap_size = e.heatmap_size();
        self.refiner.feature_size = e.feature_size();
        self.lifter.views = views;
        if self.training.identity_refiner {
            self.lifter.feature_size = e.feature_size();
            self.lifter.feature_channels = e.feature_channels;
        } else {
            self.lifter.feature_size = e.heatmap_size();
            self.lifter.feature_channels = self.refiner.offset_channels;
        }
        self.refiner.validate()?;
        self.lifter.validate()?;
        for (i, s) in [&self.stage1, &self.stage2, &self.stage3].into_iter().enumerate() {
            s.validate(i as u8 + 1)?;
        }
        if self.training.eval_batch_size == 0 || !(self.training.pose_loss_weight > 0.0) {
            return Err(Error::Config("eval_batch_size and pose_loss_weight must be positive".into()));
        }
        Ok(self)
    }

    pub fn schedule(&self, stage: u8) -> &StageSchedule {
        match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }

    /// Digest of everything that shapes training, excluding paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.out = PathBuf::new();
        hex_digest(serde_json::to_string(&c).expect("config serialises").as_bytes())
    }

    /// Digest of what determines the stage-1 estimator, so runs that differ
    /// only after stage 1 can share it.
    pub fn stage1_hash(&self) -> String {
        let key = (self.seed, self.views, &self.estimator, &self.stage1, self.training.max_train_batches, self.training.max_val_frames);
        hex_digest(serde_json::to_string(&key).expect("key serialises").as_bytes())
    }
}

/// `base` with every key present in `over` replaced, recursing into tables.
pub fn overlay_toml<T: Serialize + serde::de::DeserializeOwned>(base: &T, over: toml::Table) -> Result<T> {
    let mut merged = match toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))? {
        toml::Value::Table(t) => t,
        _ => return Err(Error::Config("configuration is not a table".into())),
    };
    merge(&mut merged, over);
    toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))
}

/// Parses `text` as TOML over the values of `base`.
pub fn parse_over<T: Serialize + serde::de::DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let over: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
    overlay_toml(base, over)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
