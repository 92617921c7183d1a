//! Lifting refined per-view features to a 16-joint 3D pose in the rig frame,
//! followed by an optional project-sample-update loop that corrects the pose
//! with features sampled where each joint currently projects.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::geometry::{RigConfig, Skeleton, View, NUM_JOINTS};
use crate::nn::{self, Init, ParamStore};
use crate::nnops::{deformable_attention_at, init_deform_attn, project_values, DeformAttnConfig};
use crate::tensor::Tensor;

/// Anchor given to joints that fall outside a camera's field of view; far
/// enough outside the grid that every bilinear tap is zero padding.
const OUTSIDE_ANCHOR: f64 = -1.0e3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseLoss {
    /// Mean per-joint Euclidean distance.
    #[default]
    Euclidean,
    /// Mean squared per-joint distance.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifterConfig {
    pub views: Vec<View>,
    /// Channels of each view's input feature map.
    pub feature_channels: usize,
    /// Feature grid `(width, height)`.
    pub feature_size: [usize; 2],
    /// Widths of the four stride-2 convolutions.
    pub conv_widths: [usize; 4],
    pub use_update_stage: bool,
    pub iterations: usize,
    /// Query width of the update stage.
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub delta_hidden: usize,
    pub loss: PoseLoss,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LifterConfig {
    pub fn desk() -> Self {
        Self {
            views: View::ALL.to_vec(),
            feature_channels: 32,
            feature_size: [8, 8],
            conv_widths: [64, 64, 96, 128],
            use_update_stage: true,
            iterations: 2,
            dim: 64,
            heads: 4,
            points: 4,
            delta_hidden: 64,
            loss: PoseLoss::Euclidean,
        }
    }

    pub fn paper() -> Self {
        Self {
            feature_channels: 128,
            feature_size: [32, 32],
            conv_widths: [256, 256, 384, 512],
            dim: 128,
            delta_hidden: 128,
            ..Self::desk()
        }
    }

    pub fn deform(&self) -> DeformAttnConfig {
        DeformAttnConfig { heads: self.heads, points: self.points, dim: self.dim, value_channels: self.feature_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.views.windows(2).any(|w| w[0] >= w[1]) {
            return shape_err(format!("lifter: views {:?} must be non-empty and canonical", self.views));
        }
        if self.feature_channels == 0 || self.feature_size.contains(&0) || self.conv_widths.contains(&0) {
            return shape_err(format!("lifter: degenerate config {self:?}"));
        }
        if self.use_update_stage {
            self.deform().validate()?;
        }
        Ok(())
    }

    /// Spatial `(width, height)` after the four stride-2 convolutions.
    pub fn reduced_size(&self) -> [usize; 2] {
        let down = |s: usize| (0..4).fold(s, |s, _| (s - 1) / 2 + 1);
        [down(self.feature_size[0]), down(self.feature_size[1])]
    }
}

/// Declares the lifter weights. The final linear layer's bias starts at the
/// default skeleton's rest pose.
pub fn init_lifter(init: &mut Init, ps: &mut ParamStore, prefix: &str, cfg: &LifterConfig) -> Result<()> {
    cfg.validate()?;
    let mut c = cfg.views.len() * cfg.feature_channels;
    for (i, &w) in cfg.conv_widths.iter().enumerate() {
        init.conv(ps, &format!("{prefix}.conv{}", i + 1), c, w, 3);
        c = w;
    }
    let [rw, rh] = cfg.reduced_size();
    init.linear(ps, &format!("{prefix}.head"), c * rw * rh, NUM_JOINTS * 3);
    let rest = Skeleton::default().forward_kinematics(&[[0.0; 3]; NUM_JOINTS]);
    ps.insert(format!("{prefix}.head.b"), rest.to_tensor().reshape(&[NUM_JOINTS * 3])?);
    if cfg.use_update_stage {
        let (d, v) = (cfg.dim, cfg.views.len());
        ps.insert(format!("{prefix}.update.joint"), init.normal(&[NUM_JOINTS, d], 1.0));
        init.linear(ps, &format!("{prefix}.update.pos"), 3, d);
        init_deform_attn(init, ps, &format!("{prefix}.update.deform"), &cfg.deform())?;
        init.linear(ps, &format!("{prefix}.update.fuse"), v * d, d);
        init.linear(ps, &format!("{prefix}.update.hidden"), d, cfg.delta_hidden);
        init.linear_zero(ps, &format!("{prefix}.update.delta"), cfg.delta_hidden, 3);
    }
    Ok(())
}

fn check_features(g: &Graph, cfg: &LifterConfig, features: &[Var]) -> Result<usize> {
    if features.len() != cfg.views.len() {
        return shape_err(format!("lifter: {} feature maps for {} views", features.len(), cfg.views.len()));
    }
    let n = g.shape(features[0]).first().copied().unwrap_or(0);
    let [fw, fh] = cfg.feature_size;
    for &f in features {
        if g.shape(f) != [n, cfg.feature_channels, fh, fw] {
            return shape_err(format!("lifter: features {:?}, expected [{n}, {}, {fh}, {fw}]", g.shape(f), cfg.feature_channels));
        }
    }
    Ok(n)
}

/// Initial pose `[N, 16, 3]` (metres, rig frame) from the channel-wise
/// concatenation of every view's features.
pub fn lift_initial(g: &mut Graph, ps: &ParamStore, prefix: &str, cfg: &LifterConfig, features: &[Var]) -> Result<Var> {
    let n = check_features(g, cfg, features)?;
    let mut x = if features.len() == 1 { features[0] } else { g.concat(features, 1)? };
    for i in 1..=4 {
        x = nn::conv(g, ps, &format!("{prefix}.conv{i}"), x, 2, 1)?;
        x = g.silu(x);
    }
    let flat = g.value(x).len() / n.max(1);
    let x = g.reshape(x, &[n, flat])?;
    let out = nn::linear(g, ps, &format!("{prefix}.head"), x)?;
    g.reshape(out, &[n, NUM_JOINTS, 3])
}

/// Projections of a `[N, 16, 3]` pose into a camera's feature grid, `[N, 16, 2]`.
pub fn feature_anchors(rig: &RigConfig, view: View, pose: &Tensor, feature_size: [usize; 2]) -> Result<Tensor> {
    let s = pose.shape();
    if s.len() != 3 || s[1] != NUM_JOINTS || s[2] != 3 {
        return shape_err(format!("feature_anchors: pose {s:?}"));
    }
    let cam = rig.camera(view);
    let (sx, sy) = cam.grid_scale(feature_size);
    let mut out = Vec::with_capacity(s[0] * NUM_JOINTS * 2);
    for p in pose.data().chunks(3) {
        let proj = cam.project(&nalgebra::Point3::new(p[0], p[1], p[2]));
        if proj.valid {
            out.extend([proj.pixel.x * sx, proj.pixel.y * sy]);
        } else {
            out.extend([OUTSIDE_ANCHOR, OUTSIDE_ANCHOR]);
        }
    }
    Tensor::new(&[s[0], NUM_JOINTS, 2], out)
}

/// Differentiable counterpart of [`feature_anchors`] for a pose node.
pub fn project_to_features(g: &mut Graph, rig: &RigConfig, view: View, pose: Var, feature_size: [usize; 2]) -> Result<Var> {
    let cam = rig.camera(view);
    let rot = cam.pose.rotation.to_rotation_matrix();
    let rt = Tensor::from_fn(&[3, 3], |i| rot[(i % 3, i / 3)]);
    let t = cam.pose.translation.vector;
    let rt = g.constant(rt);
    let t = g.constant(Tensor::new(&[3], vec![t.x, t.y, t.z])?);
    let cam_pts = g.linear(pose, rt, Some(t))?;
    let (sx, sy) = cam.grid_scale(feature_size);
    let outside = [OUTSIDE_ANCHOR / sx, OUTSIDE_ANCHOR / sy];
    let pp = cam.principal_point;
    let pixels = g.fisheye_project(cam_pts, cam.focal, [pp.x, pp.y], cam.fov_limit, outside)?;
    let scale = g.constant(Tensor::new(&[2], vec![sx, sy])?);
    g.mul(pixels, scale)
}

/// Applies `iterations` project-sample-update steps to `pose` `[N, 16, 3]`.
pub fn update_pose(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &LifterConfig,
    rig: &RigConfig,
    pose: Var,
    features: &[Var],
    iterations: usize,
) -> Result<Var> {
    let n = check_features(g, cfg, features)?;
    if g.shape(pose) != [n, NUM_JOINTS, 3] {
        return shape_err(format!("update_pose: pose {:?}", g.shape(pose)));
    }
    if iterations == 0 {
        return Ok(pose);
    }
    let p = format!("{prefix}.update");
    let dcfg = cfg.deform();
    let mut values = Vec::with_capacity(features.len());
    for &f in features {
        values.push(project_values(g, ps, &format!("{p}.deform"), &dcfg, f)?);
    }
    let joint = ps.bind(g, &format!("{p}.joint"))?;
    let mut pose = pose;
    for _ in 0..iterations {
        let pos = nn::linear(g, ps, &format!("{p}.pos"), pose)?;
        let queries = g.add(pos, joint)?;
        let mut sampled = Vec::with_capacity(features.len());
        for (&view, &v) in cfg.views.iter().zip(&values) {
            let anchors = project_to_features(g, rig, view, pose, cfg.feature_size)?;
            sampled.push(deformable_attention_at(g, ps, &format!("{p}.deform"), &dcfg, queries, anchors, v)?);
        }
        let cat = if sampled.len() == 1 { sampled[0] } else { g.concat(&sampled, 2)? };
        let fused = nn::linear(g, ps, &format!("{p}.fuse"), cat)?;
        let h = g.silu(fused);
        let h = nn::linear(g, ps, &format!("{p}.hidden"), h)?;
        let h = g.silu(h);
        let delta = nn::linear(g, ps, &format!("{p}.delta"), h)?;
        pose = g.add(pose, delta)?;
    }
    Ok(pose)
}

/// `lift_initial` followed by the configured update stage. Returns
/// `(initial, final)` poses.
pub fn lift(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &LifterConfig,
    rig: &RigConfig,
    features: &[Var],
) -> Result<(Var, Var)> {
    let initial = lift_initial(g, ps, prefix, cfg, features)?;
    let iterations = if cfg.use_update_stage { cfg.iterations } else { 0 };
    let refined = update_pose(g, ps, prefix, cfg, rig, initial, features, iterations)?;
    Ok((initial, refined))
}

/// Guard inside the square root of the Euclidean loss, in square metres.
pub const POSE_LOSS_EPS: f64 = 1e-9;

/// Mean over samples and joints of `sqrt(‖pred − gt‖² + ε) − sqrt(ε)`, so the
/// loss is smooth at zero and exactly zero for a perfect prediction.
pub fn pose_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    pose_loss_with(g, pred, gt, PoseLoss::Euclidean)
}

pub fn pose_loss_with(g: &mut Graph, pred: Var, gt: Var, kind: PoseLoss) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 3 || s[2] != 3 || g.shape(gt) != s.as_slice() {
        return shape_err(format!("pose_loss: {s:?} vs {:?}", g.shape(gt)));
    }
    let d = g.sub(pred, gt)?;
    let sq = g.mul(d, d)?;
    let per_joint = g.sum_axis(sq, 2)?;
    let count = (s[0] * s[1]).max(1) as f64;
    match kind {
        PoseLoss::Mse => {
            let total = g.sum(per_joint);
            Ok(g.scale(total, 1.0 / count))
        }
        PoseLoss::Euclidean => {
            let eps = g.constant(Tensor::scalar(POSE_LOSS_EPS));
            let guarded = g.add(per_joint, eps)?;
            let dist = g.sqrt(guarded);
            let total = g.sum(dist);
            let mean = g.scale(total, 1.0 / count);
            let floor = g.constant(Tensor::scalar(POSE_LOSS_EPS.sqrt()));
            g.sub(mean, floor)
        }
    }
}
