use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{self, Init, ParamStore};

/// Post-norm transformer self-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAttentionConfig {
    pub heads: usize,
    pub dim: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_hidden: usize,
}

/// Declares `q`, `k`, `v`, `o` projections, `ln1`, `ffn1`, `ffn2`, `ln2`.
pub fn init_self_attention(init: &mut Init, ps: &mut ParamStore, prefix: &str, cfg: &SelfAttentionConfig) -> Result<()> {
    if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
        return shape_err(format!("self-attention: dim {} not divisible by {} heads", cfg.dim, cfg.heads));
    }
    for name in ["q", "k", "v", "o"] {
        init.linear(ps, &format!("{prefix}.{name}"), cfg.dim, cfg.dim);
    }
    init.layer_norm(ps, &format!("{prefix}.ln1"), cfg.dim);
    init.linear(ps, &format!("{prefix}.ffn1"), cfg.dim, cfg.ffn_hidden);
    init.linear(ps, &format!("{prefix}.ffn2"), cfg.ffn_hidden, cfg.dim);
    init.layer_norm(ps, &format!("{prefix}.ln2"), cfg.dim);
    Ok(())
}

/// `x = LN(x + MHA(x)); x = LN(x + FFN(x))` over `[N, J, d]` tokens. No
/// positional encoding, so the block is equivariant to token permutations.
pub fn self_attention(g: &mut Graph, ps: &ParamStore, prefix: &str, cfg: &SelfAttentionConfig, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != cfg.dim || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
        return shape_err(format!("self_attention: input {s:?} for config {cfg:?}"));
    }
    let (n, j, m) = (s[0], s[1], cfg.heads);
    let dh = cfg.dim / m;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[n, j, m, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[n * m, j, dh])
    };
    let q = nn::linear(g, ps, &format!("{prefix}.q"), x)?;
    let q = split(g, q)?;
    let k = nn::linear(g, ps, &format!("{prefix}.k"), x)?;
    let k = split(g, k)?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let v = nn::linear(g, ps, &format!("{prefix}.v"), x)?;
    let v = split(g, v)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[n, m, j, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, j, cfg.dim])?;
    let o = nn::linear(g, ps, &format!("{prefix}.o"), ctx)?;
    let x1 = g.add(x, o)?;
    let x1 = nn::layer_norm(g, ps, &format!("{prefix}.ln1"), x1)?;
    let h = nn::linear(g, ps, &format!("{prefix}.ffn1"), x1)?;
    let h = g.silu(h);
    let h = nn::linear(g, ps, &format!("{prefix}.ffn2"), h)?;
    let x2 = g.add(x1, h)?;
    nn::layer_norm(g, ps, &format!("{prefix}.ln2"), x2)
}
