//! Differentiable building blocks shared by the refiner and the lifter:
//! bilinear sampling, single-scale deformable attention, multi-head
//! self-attention, and the (non-differentiable) 2D argmax.

mod attention;
mod deform;

pub use attention::{init_self_attention, self_attention, SelfAttentionConfig};
pub use deform::{deformable_attention, deformable_attention_at, init_deform_attn, project_values, DeformAttnConfig};

use crate::autograd::Graph;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Zero-padded bilinear sampling of a `[C, H, W]` grid at `[P, 2]` `(x, y)`
/// pixel coordinates; returns `[P, C]`.
///
/// Eager convenience wrapper around [`Graph::bilinear_sample`].
pub fn bilinear_sample(feature: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let f = g.constant(feature.clone());
    let c = g.constant(coords.clone());
    let out = g.bilinear_sample(f, c)?;
    Ok(g.value(out).clone())
}

/// Location and value of the maximum of an `h × w` map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    /// `(x, y)`: column then row.
    pub coords: [f64; 2],
    pub value: f64,
}

/// First maximum in row-major order. An empty map yields `(0, 0)` with value 0.
pub fn argmax_2d(map: &[f64], h: usize, w: usize) -> Result<Peak> {
    if map.len() != h * w {
        return shape_err(format!("argmax_2d: {} values for {h}×{w}", map.len()));
    }
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    let value = map.get(best).copied().unwrap_or(0.0);
    Ok(Peak { coords: [(best % w.max(1)) as f64, (best / w.max(1)) as f64], value })
}

/// [`argmax_2d`] over each channel of a `[J, h, w]` stack.
pub fn argmax_channels(stack: &Tensor) -> Result<Vec<Peak>> {
    let s = stack.shape();
    if s.len() != 3 {
        return shape_err(format!("argmax_channels: expected [J, h, w], got {s:?}"));
    }
    let plane = s[1] * s[2];
    stack.data().chunks(plane.max(1)).take(s[0]).map(|c| argmax_2d(c, s[1], s[2])).collect()
}
