//! Per-view 2D joint heatmap estimator: a small U-Net that yields initial
//! heatmaps at 1/4, decoder features at 1/8 and encoder backbone features at
//! 1/32 of the input resolution. One set of weights serves every view.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::geometry::NUM_HEATMAP_JOINTS;
use crate::nn::{self, Init, ParamStore};
use crate::nnops::argmax_channels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Estimator2DConfig {
    /// Input `(width, height)`; both multiples of 32.
    pub image_size: [usize; 2],
    pub joints: usize,
    /// Encoder widths at 1/2, 1/4, 1/8 and 1/16 resolution.
    pub widths: [usize; 4],
    /// Decoder feature channels `C_F` at 1/8 resolution.
    pub feature_channels: usize,
    /// Backbone channels `C_B` at 1/32 resolution.
    pub backbone_channels: usize,
    /// Hidden channels of the heatmap head at 1/4 resolution.
    pub head_channels: usize,
}

impl Default for Estimator2DConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl Estimator2DConfig {
    pub fn desk() -> Self {
        Self {
            image_size: [64, 64],
            joints: NUM_HEATMAP_JOINTS,
            widths: [16, 32, 64, 96],
            feature_channels: 64,
            backbone_channels: 128,
            head_channels: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: [256, 256],
            joints: NUM_HEATMAP_JOINTS,
            widths: [64, 128, 256, 384],
            feature_channels: 256,
            backbone_channels: 512,
            head_channels: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
            return shape_err(format!("estimator: image size {:?} must be positive multiples of 32", self.image_size));
        }
        if self.joints == 0
            || self.widths.contains(&0)
            || self.feature_channels == 0
            || self.backbone_channels == 0
            || self.head_channels == 0
        {
            return shape_err(format!("estimator: zero width in {self:?}"));
        }
        Ok(())
    }

    /// `(width, height)` at `1/factor` of the input.
    pub fn size_at(&self, factor: usize) -> [usize; 2] {
        [self.image_size[0] / factor, self.image_size[1] / factor]
    }

    pub fn heatmap_size(&self) -> [usize; 2] {
        self.size_at(4)
    }

    pub fn feature_size(&self) -> [usize; 2] {
        self.size_at(8)
    }

    pub fn backbone_size(&self) -> [usize; 2] {
        self.size_at(32)
    }
}

/// One view's estimator output for a batch of `N` frames.
#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    /// `[N, J, H/4, W/4]`.
    pub heatmaps: Var,
    /// `[N, C_F, H/8, W/8]`.
    pub features: Var,
    /// `[N, C_B, H/32, W/32]`.
    pub backbone: Var,
    /// `[N, J, 2]` heatmap argmax in feature-map pixels `(x, y)`.
    pub anchors: Tensor,
    /// `[N, J]` heatmap values at the argmax.
    pub peaks: Tensor,
}

/// Declares the estimator weights under `prefix`.
pub fn init_estimator(init: &mut Init, ps: &mut ParamStore, prefix: &str, cfg: &Estimator2DConfig) -> Result<()> {
    cfg.validate()?;
    let [w0, w1, w2, w3] = cfg.widths;
    let (cb, cf, ch) = (cfg.backbone_channels, cfg.feature_channels, cfg.head_channels);
    init.conv(ps, &format!("{prefix}.stem"), 3, w0, 3);
    init.conv(ps, &format!("{prefix}.down1"), w0, w1, 3);
    init.conv(ps, &format!("{prefix}.down2"), w1, w2, 3);
    init.conv(ps, &format!("{prefix}.down3"), w2, w3, 3);
    init.conv(ps, &format!("{prefix}.down4"), w3, cb, 3);
    init.conv(ps, &format!("{prefix}.up1"), cb + w3, w3, 3);
    init.conv(ps, &format!("{prefix}.up2"), w3 + w2, cf, 3);
    init.conv(ps, &format!("{prefix}.head"), cf + w1, ch, 3);
    init.linear(ps, &format!("{prefix}.out"), ch, cfg.joints);
    Ok(())
}

fn conv_act(g: &mut Graph, ps: &ParamStore, name: String, x: Var, stride: usize) -> Result<Var> {
    let y = nn::conv(g, ps, &name, x, stride, 1)?;
    Ok(g.silu(y))
}

/// Upsamples `x` to the spatial size of `skip`, concatenates the two and
/// applies a 3×3 convolution.
fn up_block(g: &mut Graph, ps: &ParamStore, name: String, x: Var, skip: Var) -> Result<Var> {
    let s = g.shape(skip).to_vec();
    let up = g.resize(x, s[2], s[3])?;
    let cat = g.concat(&[up, skip], 1)?;
    conv_act(g, ps, name, cat, 1)
}

/// Runs the estimator on `[N, 3, H, W]` images; returns
/// `(heatmaps, features, backbone)`.
fn forward(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<(Var, Var, Var)> {
    let e1 = conv_act(g, ps, format!("{prefix}.stem"), x, 2)?;
    let e2 = conv_act(g, ps, format!("{prefix}.down1"), e1, 2)?;
    let e3 = conv_act(g, ps, format!("{prefix}.down2"), e2, 2)?;
    let e4 = conv_act(g, ps, format!("{prefix}.down3"), e3, 2)?;
    let backbone = conv_act(g, ps, format!("{prefix}.down4"), e4, 2)?;
    let u1 = up_block(g, ps, format!("{prefix}.up1"), backbone, e4)?;
    let features = up_block(g, ps, format!("{prefix}.up2"), u1, e3)?;
    let head = up_block(g, ps, format!("{prefix}.head"), features, e2)?;
    let heatmaps = nn::pointwise(g, ps, &format!("{prefix}.out"), head)?;
    Ok((heatmaps, features, backbone))
}

/// Anchors (argmax scaled to feature pixels) and peak values of a
/// `[N, J, h, w]` heatmap stack.
pub fn anchors_and_peaks(heatmaps: &Tensor, feature_scale: f64) -> Result<(Tensor, Tensor)> {
    let s = heatmaps.shape();
    if s.len() != 4 {
        return shape_err(format!("anchors: expected [N, J, h, w], got {s:?}"));
    }
    let (n, j) = (s[0], s[1]);
    let mut anchors = Vec::with_capacity(n * j * 2);
    let mut peaks = Vec::with_capacity(n * j);
    for i in 0..n {
        for p in argmax_channels(&heatmaps.index_first(i))? {
            anchors.extend([p.coords[0] * feature_scale, p.coords[1] * feature_scale]);
            peaks.push(p.value);
        }
    }
    Ok((Tensor::new(&[n, j, 2], anchors)?, Tensor::new(&[n, j], peaks)?))
}

/// Estimates every view in `images` (each `[N, 3, H, W]`) with shared weights.
/// Views are batched through one forward pass.
pub fn estimate(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &Estimator2DConfig,
    images: &[Var],
) -> Result<Vec<EstimatorOutput>> {
    cfg.validate()?;
    let Some(&first) = images.first() else {
        return shape_err("estimate: no views");
    };
    let n = g.shape(first)[0];
    let [w, h] = cfg.image_size;
    for &im in images {
        if g.shape(im) != [n, 3, h, w] {
            return shape_err(format!("estimate: image {:?}, expected [{n}, 3, {h}, {w}]", g.shape(im)));
        }
    }
    let x = if images.len() == 1 { first } else { g.concat(images, 0)? };
    let (heat, feat, back) = forward(g, ps, prefix, x)?;
    let scale = cfg.feature_size()[0] as f64 / cfg.heatmap_size()[0] as f64;
    let mut out = Vec::with_capacity(images.len());
    for v in 0..images.len() {
        let (heatmaps, features, backbone) = if images.len() == 1 {
            (heat, feat, back)
        } else {
            (g.narrow(heat, 0, v * n, n)?, g.narrow(feat, 0, v * n, n)?, g.narrow(back, 0, v * n, n)?)
        };
        let (anchors, peaks) = anchors_and_peaks(g.value(heatmaps), scale)?;
        out.push(EstimatorOutput { heatmaps, features, backbone, anchors, peaks });
    }
    Ok(out)
}

/// `(1/J)·Σ_j ‖pred_j − gt_j‖²` over `[N, J, h, w]` stacks, averaged over `N`.
pub fn heatmap_mse_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 || g.shape(gt) != s.as_slice() {
        return shape_err(format!("heatmap_mse_loss: {s:?} vs {:?}", g.shape(gt)));
    }
    let d = g.sub(pred, gt)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / (s[0] * s[1]).max(1) as f64))
}
