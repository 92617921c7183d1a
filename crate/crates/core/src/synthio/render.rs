use std::collections::BTreeMap;

use nalgebra::{Point3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    joint_visibility, render_gt_heatmaps, CapsuleBody, FisheyeCamera, JointAngles, Pose3D, RigConfig, Skeleton, View,
    NUM_HEATMAP_JOINTS,
};
use crate::tensor::Tensor;

use super::motion::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    /// Heatmap grid `(width, height)`; a quarter of the image size.
    pub heatmap_size: [usize; 2],
    /// Gaussian spread in heatmap pixels.
    pub sigma: f64,
    /// Standard deviation of additive pixel noise; 0 disables it.
    pub noise_std: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { heatmap_size: [16, 16], sigma: 1.0, noise_std: 0.0 }
    }
}

/// One camera's share of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[15, h, w]`.
    pub heatmaps: Tensor,
    pub visibility: [bool; NUM_HEATMAP_JOINTS],
}

/// A synthetic frame. Loaders may fill only a subset of `views`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub views: BTreeMap<View, ViewRecord>,
    pub gt_pose: Pose3D,
    pub action: Action,
    pub identity_id: u32,
    pub frame_index: u32,
}

/// Distinct flat colour of capsule `i`: hues spaced by the golden angle.
pub fn albedo(i: usize) -> [f64; 3] {
    let h = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Index of the nearest capsule hit by the ray through pixel `(x, y)`.
fn cast(cam: &FisheyeCamera, body: &CapsuleBody, pose: &Pose3D, bounds: &[(Point3<f64>, f64)], x: f64, y: f64) -> Option<usize> {
    let ray = cam.unproject(&Vector2::new(x, y)).ok()?;
    let mut best: Option<(f64, usize)> = None;
    for (i, cap) in body.capsules.iter().enumerate() {
        let (c, r) = bounds[i];
        if ray.distance_to(&c) > r {
            continue;
        }
        if let Some((t0, t1)) = cap.intersect(pose, &ray) {
            if t1 <= 0.0 {
                continue;
            }
            let t = t0.max(0.0);
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Flat-shaded, depth-tested rendering of the capsule body, `[3, H, W]`.
pub fn render_image(cam: &FisheyeCamera, body: &CapsuleBody, pose: &Pose3D) -> Tensor {
    let [w, h] = cam.image_size;
    let bounds: Vec<(Point3<f64>, f64)> = body
        .capsules
        .iter()
        .map(|c| {
            let (a, b) = c.endpoints(pose);
            (nalgebra::center(&a, &b), (b - a).norm() / 2.0 + c.radius)
        })
        .collect();
    let mut img = Tensor::zeros(&[3, h, w]);
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            if let Some(i) = cast(cam, body, pose, &bounds, x as f64, y as f64) {
                let col = albedo(i);
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = col[ch];
                }
            }
        }
    }
    img
}

/// Renders every view of one posed frame. Values are rounded to `f32` so
/// the record survives a save/load round trip unchanged.
pub fn render_frame(
    rig: &RigConfig,
    skeleton: &Skeleton,
    body: &CapsuleBody,
    angles: &JointAngles,
    params: &RenderParams,
    noise_seed: u64,
) -> Result<BTreeMap<View, ViewRecord>> {
    if !angles.iter().flatten().all(|a| a.is_finite()) {
        return Err(Error::Config("joint angles must be finite".into()));
    }
    let pose = skeleton.forward_kinematics(angles);
    render_pose(rig, body, &pose, params, noise_seed)
}

pub fn render_pose(
    rig: &RigConfig,
    body: &CapsuleBody,
    pose: &Pose3D,
    params: &RenderParams,
    noise_seed: u64,
) -> Result<BTreeMap<View, ViewRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = (params.noise_std > 0.0)
        .then(|| Normal::new(0.0, params.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}"))))
        .transpose()?;
    let mut out = BTreeMap::new();
    for view in View::ALL {
        let cam = rig.camera(view);
        let mut image = render_image(cam, body, pose);
        if let Some(n) = &noise {
            for v in image.data_mut() {
                *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let mut heatmaps = render_gt_heatmaps(cam, pose, params.sigma, params.heatmap_size)?;
        for t in [&mut image, &mut heatmaps] {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let mut visibility = [false; NUM_HEATMAP_JOINTS];
        for (c, vis) in visibility.iter_mut().enumerate() {
            *vis = joint_visibility(rig, pose, body, view, c + 1);
        }
        out.insert(view, ViewRecord { image, heatmaps, visibility });
    }
    Ok(out)
}
