//! Multi-view heatmap refinement. Learnable per-view joint queries, enhanced
//! with heatmap and RGB embeddings, gather evidence from every view's decoder
//! features by deformable attention around that view's 2D anchors. The
//! evidence is masked by heatmap confidence, fused, and self-attended. It is
//! then turned into an offset map that corrects the target view's features
//! before a new heatmap is regressed.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::estimator2d::{heatmap_mse_loss, EstimatorOutput};
use crate::geometry::{View, NUM_HEATMAP_JOINTS};
use crate::nn::{self, Init, ParamStore};
use crate::nnops::{
    deformable_attention, init_deform_attn, init_self_attention, project_values, self_attention, DeformAttnConfig,
    SelfAttentionConfig,
};
use crate::tensor::Tensor;

/// Switches that remove one ingredient of the refiner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerAblation {
    /// Standard cross-attention over every feature position instead of
    /// deformable attention around the anchors.
    pub no_anchor: bool,
    /// All masks set to one.
    pub no_mask: bool,
    /// Neither heatmap nor RGB embeddings.
    pub no_embeddings: bool,
    /// Heatmap embeddings only.
    pub no_rgb_embedding: bool,
}

impl RefinerAblation {
    pub fn label(&self) -> &'static str {
        match (self.no_anchor, self.no_mask, self.no_embeddings, self.no_rgb_embedding) {
            (false, false, false, false) => "full",
            (true, false, false, false) => "no_anchor",
            (false, true, false, false) => "no_mask",
            (false, false, true, _) => "no_embeddings",
            (false, false, false, true) => "no_rgb_embedding",
            _ => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Views taking part, in canonical order; one query set each.
    pub views: Vec<View>,
    pub joints: usize,
    /// Query width `d`; a perfect square.
    pub dim: usize,
    /// Deformable attention heads `M`.
    pub heads: usize,
    /// Sampling points per head `K`.
    pub points: usize,
    pub self_attention_heads: usize,
    pub ffn_hidden: usize,
    /// Decoder feature channels `C_F`.
    pub feature_channels: usize,
    /// Backbone channels `C_B`.
    pub backbone_channels: usize,
    /// Offset-map channels `C_O`.
    pub offset_channels: usize,
    /// 1×1 projection of the features to `C_O` before the offset is added.
    /// Only optional when `C_F == C_O`.
    pub feature_projection: bool,
    /// Heatmap grid `(width, height)`.
    pub heatmap_size: [usize; 2],
    /// Feature grid `(width, height)`.
    pub feature_size: [usize; 2],
    pub heatmap_embed_hidden: usize,
    pub offset_hidden: usize,
    pub refine_hidden: usize,
    pub head_width: usize,
    /// Mask threshold `τ` on initial heatmap peaks (inclusive).
    pub mask_threshold: f64,
    pub ablation: RefinerAblation,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RefinerConfig {
    pub fn desk() -> Self {
        Self {
            views: View::ALL.to_vec(),
            joints: NUM_HEATMAP_JOINTS,
            dim: 64,
            heads: 8,
            points: 4,
            self_attention_heads: 8,
            ffn_hidden: 128,
            feature_channels: 64,
            backbone_channels: 128,
            offset_channels: 32,
            feature_projection: true,
            heatmap_size: [16, 16],
            feature_size: [8, 8],
            heatmap_embed_hidden: 64,
            offset_hidden: 64,
            refine_hidden: 128,
            head_width: 64,
            mask_threshold: 0.5,
            ablation: RefinerAblation::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            dim: 256,
            ffn_hidden: 512,
            feature_channels: 256,
            backbone_channels: 512,
            offset_channels: 128,
            heatmap_size: [64, 64],
            feature_size: [32, 32],
            heatmap_embed_hidden: 256,
            head_width: 256,
            ..Self::desk()
        }
    }

    /// Side of the square grid the queries are reshaped to.
    pub fn query_side(&self) -> usize {
        (self.dim as f64).sqrt().round() as usize
    }

    pub fn deform(&self) -> DeformAttnConfig {
        DeformAttnConfig { heads: self.heads, points: self.points, dim: self.dim, value_channels: self.feature_channels }
    }

    pub fn self_attention(&self) -> SelfAttentionConfig {
        SelfAttentionConfig { heads: self.self_attention_heads, dim: self.dim, ffn_hidden: self.ffn_hidden }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.query_side();
        if s * s != self.dim {
            return shape_err(format!("refiner: dim {} is not a perfect square", self.dim));
        }
        if self.views.is_empty() || self.views.windows(2).any(|w| w[0] >= w[1]) {
            return shape_err(format!("refiner: views {:?} must be non-empty and canonical", self.views));
        }
        if !self.feature_projection && self.feature_channels != self.offset_channels {
            return shape_err("refiner: feature projection can only be dropped when C_F == C_O");
        }
        if self.joints == 0 || self.heatmap_size.contains(&0) || self.feature_size.contains(&0) {
            return shape_err(format!("refiner: degenerate config {self:?}"));
        }
        self.deform().validate()?;
        if self.self_attention_heads == 0 || self.dim % self.self_attention_heads != 0 {
            return shape_err("refiner: self-attention heads must divide dim");
        }
        Ok(())
    }
}

/// Declares every refiner weight under `prefix`.
pub fn init_refiner(init: &mut Init, ps: &mut ParamStore, prefix: &str, cfg: &RefinerConfig) -> Result<()> {
    cfg.validate()?;
    let (d, j) = (cfg.dim, cfg.joints);
    let [hw, hh] = cfg.heatmap_size;
    let [fw, fh] = cfg.feature_size;
    for v in &cfg.views {
        ps.insert(format!("{prefix}.query.{v}"), init.normal(&[j, d], 1.0));
    }
    init.linear(ps, &format!("{prefix}.p_hm.l1"), hw * hh, cfg.heatmap_embed_hidden);
    init.linear(ps, &format!("{prefix}.p_hm.l2"), cfg.heatmap_embed_hidden, d);
    init.linear(ps, &format!("{prefix}.p_rgb"), cfg.backbone_channels, d);
    init.linear(ps, &format!("{prefix}.p_q"), d, d);
    if cfg.ablation.no_anchor {
        for name in ["q", "k", "v", "o"] {
            let input = if name == "k" || name == "v" { cfg.feature_channels } else { d };
            init.linear(ps, &format!("{prefix}.xattn.{name}"), input, d);
        }
        ps.insert(format!("{prefix}.xattn.pos"), init.normal(&[fw * fh, d], 1.0));
    } else {
        init_deform_attn(init, ps, &format!("{prefix}.deform"), &cfg.deform())?;
    }
    init.linear(ps, &format!("{prefix}.fuse"), cfg.views.len() * d, d);
    init_self_attention(init, ps, &format!("{prefix}.sa"), &cfg.self_attention())?;
    init.linear(ps, &format!("{prefix}.f_o.l1"), j, cfg.offset_hidden);
    init.linear(ps, &format!("{prefix}.f_o.l2"), cfg.offset_hidden, cfg.offset_channels);
    if cfg.feature_projection {
        init.linear(ps, &format!("{prefix}.proj"), cfg.feature_channels, cfg.offset_channels);
    }
    init.linear(ps, &format!("{prefix}.f_r.l1"), cfg.offset_channels, cfg.refine_hidden);
    init.linear(ps, &format!("{prefix}.f_r.l2"), cfg.refine_hidden, cfg.offset_channels);
    init.conv(ps, &format!("{prefix}.f_hm.conv"), cfg.offset_channels, cfg.head_width, 3);
    init.linear(ps, &format!("{prefix}.f_hm.l1"), cfg.head_width, cfg.head_width);
    init.linear(ps, &format!("{prefix}.f_hm.l2"), cfg.head_width, cfg.head_width);
    init.linear(ps, &format!("{prefix}.f_hm.out"), cfg.head_width, j);
    Ok(())
}

/// Binary masks `[N, J]`: 1 where the peak is at least `tau`.
pub fn uncertainty_masks(peaks: &Tensor, tau: f64) -> Tensor {
    peaks.map(|p| if p >= tau { 1.0 } else { 0.0 })
}

fn mlp2(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, ps, &format!("{prefix}.l1"), x)?;
    let h = g.silu(h);
    nn::linear(g, ps, &format!("{prefix}.l2"), h)
}

fn check_output(g: &Graph, cfg: &RefinerConfig, out: &EstimatorOutput) -> Result<usize> {
    let hs = g.shape(out.heatmaps);
    let n = hs.first().copied().unwrap_or(0);
    let [hw, hh] = cfg.heatmap_size;
    let [fw, fh] = cfg.feature_size;
    let fs = g.shape(out.features);
    let bs = g.shape(out.backbone);
    if hs != [n, cfg.joints, hh, hw]
        || fs != [n, cfg.feature_channels, fh, fw]
        || bs.len() != 4
        || bs[0] != n
        || bs[1] != cfg.backbone_channels
        || out.anchors.shape() != [n, cfg.joints, 2]
        || out.peaks.shape() != [n, cfg.joints]
    {
        return shape_err(format!(
            "refiner: estimator output heatmaps {hs:?}, features {fs:?}, backbone {bs:?}, anchors {:?} do not match config",
            out.anchors.shape()
        ));
    }
    Ok(n)
}

/// `Q′_v = P_Q(Q_v + E_v + G_v)` for a batch: `E_v = P_HM(Ĥ_v)` per joint and
/// `G_v = P_RGB(avgpool(B_v))` shared by all joints. Returns `[N, J, d]`.
pub fn enhance_queries(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &RefinerConfig,
    view: View,
    heatmaps: Var,
    backbone: Var,
) -> Result<Var> {
    let hs = g.shape(heatmaps).to_vec();
    let [hw, hh] = cfg.heatmap_size;
    if hs.len() != 4 || hs[1..] != [cfg.joints, hh, hw] {
        return shape_err(format!("enhance_queries: heatmaps {hs:?}"));
    }
    let bs = g.shape(backbone).to_vec();
    if bs.len() != 4 || bs[0] != hs[0] || bs[1] != cfg.backbone_channels {
        return shape_err(format!("enhance_queries: backbone {bs:?}"));
    }
    let n = hs[0];
    let mut q = ps.bind(g, &format!("{prefix}.query.{view}"))?;
    if !cfg.ablation.no_embeddings {
        let flat = g.reshape(heatmaps, &[n, cfg.joints, hw * hh])?;
        let e = mlp2(g, ps, &format!("{prefix}.p_hm"), flat)?;
        q = g.add(e, q)?;
        if !cfg.ablation.no_rgb_embedding {
            let pooled = g.global_avg_pool(backbone)?;
            let rgb = nn::linear(g, ps, &format!("{prefix}.p_rgb"), pooled)?;
            let rgb = g.reshape(rgb, &[n, 1, cfg.dim])?;
            q = g.add(q, rgb)?;
        }
    }
    if g.shape(q).len() == 2 {
        let zeros = g.constant(Tensor::zeros(&[n, cfg.joints, cfg.dim]));
        q = g.add(zeros, q)?;
    }
    nn::linear(g, ps, &format!("{prefix}.p_q"), q)
}

/// Per-source-view tensors computed once and shared by every target view.
pub struct Sources {
    /// Deformable-attention value maps, or cross-attention `(keys, values)`.
    kind: SourceKind,
    /// `[N, J]` binary masks.
    pub masks: Vec<Tensor>,
}

enum SourceKind {
    Deform(Vec<Var>),
    Dense(Vec<(Var, Var)>),
}

/// Projects every source view's features once and computes its masks.
pub fn prepare_sources(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &RefinerConfig,
    outputs: &[EstimatorOutput],
) -> Result<Sources> {
    cfg.validate()?;
    if outputs.len() != cfg.views.len() {
        return shape_err(format!("refiner: {} estimator outputs for {} views", outputs.len(), cfg.views.len()));
    }
    let mut masks = Vec::with_capacity(outputs.len());
    for o in outputs {
        let n = check_output(g, cfg, o)?;
        masks.push(if cfg.ablation.no_mask {
            Tensor::full(&[n, cfg.joints], 1.0)
        } else {
            uncertainty_masks(&o.peaks, cfg.mask_threshold)
        });
    }
    let kind = if cfg.ablation.no_anchor {
        let mut kv = Vec::with_capacity(outputs.len());
        for o in outputs {
            let s = g.shape(o.features).to_vec();
            let flat = g.reshape(o.features, &[s[0], s[1], s[2] * s[3]])?;
            let tokens = g.permute(flat, &[0, 2, 1])?;
            let k = nn::linear(g, ps, &format!("{prefix}.xattn.k"), tokens)?;
            let pos = ps.bind(g, &format!("{prefix}.xattn.pos"))?;
            let k = g.add(k, pos)?;
            let v = nn::linear(g, ps, &format!("{prefix}.xattn.v"), tokens)?;
            kv.push((k, v));
        }
        SourceKind::Dense(kv)
    } else {
        let dcfg = cfg.deform();
        let mut values = Vec::with_capacity(outputs.len());
        for o in outputs {
            values.push(project_values(g, ps, &format!("{prefix}.deform"), &dcfg, o.features)?);
        }
        SourceKind::Deform(values)
    };
    Ok(Sources { kind, masks })
}

/// Multi-head attention of `q` `[N, J, d]` over `keys`/`values` `[N, P, d]`.
fn dense_attention(g: &mut Graph, ps: &ParamStore, prefix: &str, heads: usize, q: Var, keys: Var, values: Var) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let (n, j, d) = (qs[0], qs[1], qs[2]);
    let p = g.shape(keys)[1];
    let dh = d / heads;
    let split = |g: &mut Graph, t: Var, len: usize| -> Result<Var> {
        let t = g.reshape(t, &[n, len, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[n * heads, len, dh])
    };
    let qp = nn::linear(g, ps, &format!("{prefix}.xattn.q"), q)?;
    let qh = split(g, qp, j)?;
    let kh = split(g, keys, p)?;
    let kt = g.permute(kh, &[0, 2, 1])?;
    let vh = split(g, values, p)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, vh)?;
    let ctx = g.reshape(ctx, &[n, heads, j, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, j, d])?;
    nn::linear(g, ps, &format!("{prefix}.xattn.o"), ctx)
}

/// Refined features `R_v` `[N, C_O, h, w]` and heatmaps `H̃_v` `[N, J, h, w]`,
/// both on the heatmap grid.
#[derive(Clone, Copy, Debug)]
pub struct RefinedView {
    pub features: Var,
    pub heatmaps: Var,
}

/// Refines the view at position `target` of `cfg.views` from the enhanced
/// queries `[N, J, d]` and every source view.
pub fn refine_view(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &RefinerConfig,
    target: usize,
    outputs: &[EstimatorOutput],
    sources: &Sources,
    queries: Var,
) -> Result<RefinedView> {
    let Some(own) = outputs.get(target) else {
        return shape_err(format!("refine_view: target {target} of {} views", outputs.len()));
    };
    let n = check_output(g, cfg, own)?;
    let (j, d) = (cfg.joints, cfg.dim);
    if g.shape(queries) != [n, j, d] {
        return shape_err(format!("refine_view: queries {:?}", g.shape(queries)));
    }
    let mut gathered = Vec::with_capacity(outputs.len());
    for (k, src) in outputs.iter().enumerate() {
        let q = match &sources.kind {
            SourceKind::Deform(values) => {
                deformable_attention(g, ps, &format!("{prefix}.deform"), &cfg.deform(), queries, &src.anchors, values[k])?
            }
            SourceKind::Dense(kv) => dense_attention(g, ps, prefix, cfg.heads, queries, kv[k].0, kv[k].1)?,
        };
        let mask = g.constant(sources.masks[k].clone().reshape(&[n, j, 1])?);
        gathered.push(g.mul(q, mask)?);
    }
    let cat = g.concat(&gathered, 2)?;
    let fused = nn::linear(g, ps, &format!("{prefix}.fuse"), cat)?;
    let attended = self_attention(g, ps, &format!("{prefix}.sa"), &cfg.self_attention(), fused)?;

    let s = cfg.query_side();
    let [fw, fh] = cfg.feature_size;
    let grid = g.reshape(attended, &[n, j, s, s])?;
    let grid = g.permute(grid, &[0, 2, 3, 1])?;
    let off = mlp2(g, ps, &format!("{prefix}.f_o"), grid)?;
    let off = g.permute(off, &[0, 3, 1, 2])?;
    let off = g.resize(off, fh, fw)?;

    let base = if cfg.feature_projection {
        nn::pointwise(g, ps, &format!("{prefix}.proj"), own.features)?
    } else {
        own.features
    };
    let summed = g.add(base, off)?;
    let [hw, hh] = cfg.heatmap_size;
    let summed = g.resize(summed, hh, hw)?;
    let perm = g.permute(summed, &[0, 2, 3, 1])?;
    let refined = mlp2(g, ps, &format!("{prefix}.f_r"), perm)?;
    let features = g.permute(refined, &[0, 3, 1, 2])?;

    let h = nn::conv(g, ps, &format!("{prefix}.f_hm.conv"), features, 2, 1)?;
    let h = g.silu(h);
    let h = g.permute(h, &[0, 2, 3, 1])?;
    let h = nn::linear(g, ps, &format!("{prefix}.f_hm.l1"), h)?;
    let h = g.silu(h);
    let h = nn::linear(g, ps, &format!("{prefix}.f_hm.l2"), h)?;
    let h = g.silu(h);
    let h = g.permute(h, &[0, 3, 1, 2])?;
    let h = g.resize(h, hh, hw)?;
    let heatmaps = nn::pointwise(g, ps, &format!("{prefix}.f_hm.out"), h)?;
    Ok(RefinedView { features, heatmaps })
}

/// Refines every configured view, in `cfg.views` order.
pub fn refine_all(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &RefinerConfig,
    outputs: &[EstimatorOutput],
) -> Result<Vec<RefinedView>> {
    let sources = prepare_sources(g, ps, prefix, cfg, outputs)?;
    let mut out = Vec::with_capacity(outputs.len());
    for (t, &view) in cfg.views.iter().enumerate() {
        let q = enhance_queries(g, ps, prefix, cfg, view, outputs[t].heatmaps, outputs[t].backbone)?;
        out.push(refine_view(g, ps, prefix, cfg, t, outputs, &sources, q)?);
    }
    Ok(out)
}

/// Sum over views of the heatmap MSE of refined and of initial heatmaps.
pub fn refinement_loss(g: &mut Graph, refined: &[Var], initial: &[Var], gt: &[Var]) -> Result<Var> {
    if refined.len() != gt.len() || initial.len() != gt.len() || gt.is_empty() {
        return shape_err(format!(
            "refinement_loss: {} refined, {} initial, {} targets",
            refined.len(),
            initial.len(),
            gt.len()
        ));
    }
    let mut total: Option<Var> = None;
    for ((&r, &i), &t) in refined.iter().zip(initial).zip(gt) {
        let lr = heatmap_mse_loss(g, r, t)?;
        let li = heatmap_mse_loss(g, i, t)?;
        let s = g.add(lr, li)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("non-empty"))
}
