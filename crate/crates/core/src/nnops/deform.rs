use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{self, Init, ParamStore};
use crate::tensor::Tensor;

/// Shape of a single-scale deformable attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    /// Number of heads `M`.
    pub heads: usize,
    /// Sampling points per head `K`.
    pub points: usize,
    /// Query width `d`; must be divisible by `heads`.
    pub dim: usize,
    /// Channels of the sampled feature map.
    pub value_channels: usize,
}

impl DeformAttnConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return shape_err(format!("deformable attention: invalid config {self:?}"));
        }
        Ok(())
    }
}

/// Declares the weights of a deformable attention block under `prefix`:
///
/// * `value.w` `[C, d]` (no bias, so projection commutes with zero padding)
/// * `offset.w/b` `[d, M·K·2]`, zero-initialised
/// * `attn.w/b` `[d, M·K]`
/// * `out.w/b` `[d, d]`
pub fn init_deform_attn(init: &mut Init, ps: &mut ParamStore, prefix: &str, cfg: &DeformAttnConfig) -> Result<()> {
    cfg.validate()?;
    let (d, mk) = (cfg.dim, cfg.heads * cfg.points);
    ps.insert(format!("{prefix}.value.w"), init.he(&[cfg.value_channels, d], cfg.value_channels));
    init.linear_zero(ps, &format!("{prefix}.offset"), d, mk * 2);
    init.linear(ps, &format!("{prefix}.attn"), d, mk);
    init.linear(ps, &format!("{prefix}.out"), d, d);
    Ok(())
}

/// Projects a `[N, C, H, W]` feature map to per-head value maps
/// `[N, M, d/M, H, W]`. Computed once per map and reusable across queries.
pub fn project_values(g: &mut Graph, ps: &ParamStore, prefix: &str, cfg: &DeformAttnConfig, feature: Var) -> Result<Var> {
    let s = g.shape(feature).to_vec();
    if s.len() != 4 || s[1] != cfg.value_channels {
        return shape_err(format!("project_values: feature {s:?} vs {} channels", cfg.value_channels));
    }
    let w = ps.bind(g, &format!("{prefix}.value.w"))?;
    let perm = g.permute(feature, &[0, 2, 3, 1])?;
    let v = g.linear(perm, w, None)?;
    let v = g.permute(v, &[0, 3, 1, 2])?;
    g.reshape(v, &[s[0], cfg.heads, cfg.head_dim(), s[2], s[3]])
}

/// Deformable attention of `queries` `[N, Q, d]` over value maps from
/// [`project_values`], sampling `K` learned offsets (in feature pixels)
/// around each query's `anchors` `[N, Q, 2]`. Returns `[N, Q, d]`.
///
/// Anchors are plain tensors: no gradient flows into them.
pub fn deformable_attention(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &DeformAttnConfig,
    queries: Var,
    anchors: &Tensor,
    values: Var,
) -> Result<Var> {
    let anchors = g.constant(anchors.clone());
    deformable_attention_at(g, ps, prefix, cfg, queries, anchors, values)
}

/// [`deformable_attention`] with anchors that are graph nodes, so gradients
/// reach whatever produced them.
pub fn deformable_attention_at(
    g: &mut Graph,
    ps: &ParamStore,
    prefix: &str,
    cfg: &DeformAttnConfig,
    queries: Var,
    anchors: Var,
    values: Var,
) -> Result<Var> {
    cfg.validate()?;
    let qs = g.shape(queries).to_vec();
    let vs = g.shape(values).to_vec();
    if qs.len() != 3 || qs[2] != cfg.dim {
        return shape_err(format!("deformable_attention: queries {qs:?}, dim {}", cfg.dim));
    }
    let (n, q, m, k) = (qs[0], qs[1], cfg.heads, cfg.points);
    if g.shape(anchors) != [n, q, 2] {
        return shape_err(format!("deformable_attention: anchors {:?} for queries {qs:?}", g.shape(anchors)));
    }
    if vs.len() != 5 || vs[0] != n || vs[1] != m || vs[2] != cfg.head_dim() {
        return shape_err(format!("deformable_attention: values {vs:?} for config {cfg:?}"));
    }
    let off = nn::linear(g, ps, &format!("{prefix}.offset"), queries)?;
    let off = g.reshape(off, &[n, q, m, k, 2])?;
    let anchor = g.reshape(anchors, &[n, q, 1, 1, 2])?;
    let loc = g.add(off, anchor)?;
    let logits = nn::linear(g, ps, &format!("{prefix}.attn"), queries)?;
    let logits = g.reshape(logits, &[n, q, m, k])?;
    let attn = g.softmax(logits);
    let sampled = g.deform_sample(values, loc, attn)?;
    nn::linear(g, ps, &format!("{prefix}.out"), sampled)
}
