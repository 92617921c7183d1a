//! Brute-force reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rearpose::geometry::{RigParams, NUM_JOINTS};
use rearpose::harness::{ExperimentConfig, ViewSubset};
use rearpose::lifter3d::{LifterConfig, POSE_LOSS_EPS};
use rearpose::nn::ParamStore;
use rearpose::nnops::{DeformAttnConfig, SelfAttentionConfig};
use rearpose::refiner::RefinerConfig;
use rearpose::synthio::{generate_dataset, Action, Dataset, DatasetConfig, RenderParams};
use rearpose::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Replaces every parameter with a uniform draw so no path is trivially dead.
pub fn randomise(ps: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in ps.iter_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_diff(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

fn w(ps: &ParamStore, name: &str) -> Tensor {
    ps.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

/// `x · W + b` for one row with `W` stored `[in, out]`.
pub fn dense(ps: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let wt = w(ps, &format!("{prefix}.w"));
    let (i, o) = (wt.dim(0), wt.dim(1));
    assert_eq!(i, x.len());
    let mut out = match ps.get(&format!("{prefix}.b")) {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; o],
    };
    for (r, &xv) in x.iter().enumerate() {
        for (c, ov) in out.iter_mut().enumerate() {
            *ov += xv * wt.data()[r * o + c];
        }
    }
    out
}

fn tent(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Zero-padded bilinear interpolation of a `[C, H, W]` map at `(x, y)` as a
/// sum of tent kernels over every grid point.
pub fn bilinear_oracle(f: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, wd) = (f.dim(0), f.dim(1), f.dim(2));
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for iy in 0..h {
                for ix in 0..wd {
                    s += f.at(&[ch, iy, ix]) * tent(x - ix as f64) * tent(y - iy as f64);
                }
            }
            s
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Deformable attention from raw features `[N, C_v, H, W]`: every head
/// samples `K` points around its anchor, projects them to values and mixes
/// them with softmax weights. Returns `[N, Q, d]` flattened.
pub fn deformable_attention_oracle(
    ps: &ParamStore,
    prefix: &str,
    cfg: &DeformAttnConfig,
    queries: &Tensor,
    anchors: &Tensor,
    features: &Tensor,
) -> Vec<f64> {
    let (n, q, d) = (queries.dim(0), queries.dim(1), queries.dim(2));
    let (m, k, dh) = (cfg.heads, cfg.points, cfg.dim / cfg.heads);
    let vw = w(ps, &format!("{prefix}.value.w"));
    let mut out = Vec::with_capacity(n * q * d);
    for ni in 0..n {
        let fmap = features.index_first(ni);
        for qi in 0..q {
            let qv: Vec<f64> = (0..d).map(|c| queries.at(&[ni, qi, c])).collect();
            let off = dense(ps, &format!("{prefix}.offset"), &qv);
            let logits = dense(ps, &format!("{prefix}.attn"), &qv);
            let mut acc = vec![0.0; d];
            for mi in 0..m {
                let a = softmax(&logits[mi * k..(mi + 1) * k]);
                for ki in 0..k {
                    let p = (mi * k + ki) * 2;
                    let x = anchors.at(&[ni, qi, 0]) + off[p];
                    let y = anchors.at(&[ni, qi, 1]) + off[p + 1];
                    let raw = bilinear_oracle(&fmap, x, y);
                    for c in 0..dh {
                        let col = mi * dh + c;
                        let v: f64 = raw.iter().enumerate().map(|(r, rv)| rv * vw.at(&[r, col])).sum();
                        acc[col] += a[ki] * v;
                    }
                }
            }
            out.extend(dense(ps, &format!("{prefix}.out"), &acc));
        }
    }
    out
}

fn layer_norm(ps: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = w(ps, &format!("{prefix}.gamma"));
    let b = w(ps, &format!("{prefix}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i]).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Post-norm multi-head self-attention block over `[N, J, d]` tokens.
pub fn self_attention_oracle(ps: &ParamStore, prefix: &str, cfg: &SelfAttentionConfig, x: &Tensor) -> Vec<f64> {
    let (n, j, d) = (x.dim(0), x.dim(1), x.dim(2));
    let (m, dh) = (cfg.heads, cfg.dim / cfg.heads);
    let mut out = Vec::with_capacity(n * j * d);
    for ni in 0..n {
        let tokens: Vec<Vec<f64>> = (0..j).map(|t| (0..d).map(|c| x.at(&[ni, t, c])).collect()).collect();
        let proj = |name: &str| -> Vec<Vec<f64>> { tokens.iter().map(|t| dense(ps, &format!("{prefix}.{name}"), t)).collect() };
        let (qs, ks, vs) = (proj("q"), proj("k"), proj("v"));
        for t in 0..j {
            let mut ctx = vec![0.0; d];
            for h in 0..m {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..j)
                    .map(|s| qs[t][r.clone()].iter().zip(&ks[s][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for s in 0..j {
                    for c in r.clone() {
                        ctx[c] += a[s] * vs[s][c];
                    }
                }
            }
            let o = dense(ps, &format!("{prefix}.o"), &ctx);
            let x1: Vec<f64> = tokens[t].iter().zip(&o).map(|(a, b)| a + b).collect();
            let x1 = layer_norm(ps, &format!("{prefix}.ln1"), &x1);
            let h: Vec<f64> = dense(ps, &format!("{prefix}.ffn1"), &x1).into_iter().map(silu).collect();
            let h = dense(ps, &format!("{prefix}.ffn2"), &h);
            let x2: Vec<f64> = x1.iter().zip(&h).map(|(a, b)| a + b).collect();
            out.extend(layer_norm(ps, &format!("{prefix}.ln2"), &x2));
        }
    }
    out
}

/// Mean over samples and joints of the squared heatmap difference summed
/// over pixels.
pub fn heatmap_mse_oracle(pred: &Tensor, gt: &Tensor) -> f64 {
    let (n, j, h, wd) = (pred.dim(0), pred.dim(1), pred.dim(2), pred.dim(3));
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..j {
            for y in 0..h {
                for x in 0..wd {
                    total += (pred.at(&[a, b, y, x]) - gt.at(&[a, b, y, x])).powi(2);
                }
            }
        }
    }
    total / (n * j) as f64
}

pub fn pose_loss_oracle(pred: &Tensor, gt: &Tensor) -> f64 {
    let n = pred.dim(0);
    let mut total = 0.0;
    for a in 0..n {
        for j in 0..NUM_JOINTS {
            let d2: f64 = (0..3).map(|c| (pred.at(&[a, j, c]) - gt.at(&[a, j, c])).powi(2)).sum();
            total += (d2 + POSE_LOSS_EPS).sqrt() - POSE_LOSS_EPS.sqrt();
        }
    }
    total / (n * NUM_JOINTS) as f64
}

fn centred(p: &[Point3<f64>]) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let c = p.iter().map(|q| q.coords).sum::<Vector3<f64>>() / p.len() as f64;
    (p.iter().map(|q| q.coords - c).collect(), c)
}

/// Similarity alignment of `pred` onto `gt` found by searching rotation
/// space: a coarse axis-angle grid followed by a shrinking pattern search.
/// For a fixed rotation the best scale and translation are closed-form.
/// Returns the aligned points.
pub fn procrustes_grid_oracle(pred: &[Point3<f64>], gt: &[Point3<f64>]) -> Vec<Point3<f64>> {
    let (x, _) = centred(pred);
    let (y, cy) = centred(gt);
    let mut mcov = Matrix3::zeros();
    for (a, b) in x.iter().zip(&y) {
        mcov += a * b.transpose();
    }
    // Σ yᵢ·R xᵢ = tr(R · Σ xᵢ yᵢᵀ)
    let score = |r: &Rotation3<f64>| (r.matrix() * mcov).trace();
    let steps = 24;
    let lim = std::f64::consts::PI;
    let mut best = Rotation3::identity();
    let mut best_s = score(&best);
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let v = Vector3::new(i as f64, j as f64, k as f64) * (2.0 * lim / steps as f64) - Vector3::repeat(lim);
                if v.norm() > lim {
                    continue;
                }
                let r = Rotation3::new(v);
                let s = score(&r);
                if s > best_s {
                    best_s = s;
                    best = r;
                }
            }
        }
    }
    let mut h = 2.0 * lim / steps as f64;
    while h > 1e-13 {
        let mut moved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut v = Vector3::zeros();
                v[axis] = sign * h;
                let r = best * Rotation3::new(v);
                let s = score(&r);
                if s > best_s {
                    best_s = s;
                    best = r;
                    moved = true;
                }
            }
        }
        if !moved {
            h *= 0.5;
        }
    }
    let xx: f64 = x.iter().map(|a| a.norm_squared()).sum();
    let scale = best_s / xx;
    x.iter().map(|a| Point3::from(best * a * scale + cy)).collect()
}

pub fn points(t: &Tensor) -> Vec<Point3<f64>> {
    t.data().chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

pub fn mean_distance_mm(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    1000.0 * a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// A 32×32-pixel dataset with one identity per split and two short clips.
pub fn tiny_dataset(root: &Path, seed: u64) -> Dataset {
    let dc = DatasetConfig {
        identities_per_split: [1, 1, 1],
        actions: vec![Action::Boxing, Action::Walking],
        frames_per_clip: 3,
        rig: RigParams { image_size: [32, 32], ..RigParams::default() },
        render: RenderParams { heatmap_size: [8, 8], ..RenderParams::default() },
        ..DatasetConfig::default()
    };
    generate_dataset(&dc, seed, root).unwrap();
    Dataset::open(root, None).unwrap()
}

/// Narrow model and two-epoch stages for [`tiny_dataset`].
pub fn tiny_config(dataset: &Path, out: &Path, views: ViewSubset) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(5);
    c.dataset = dataset.to_path_buf();
    c.out = out.to_path_buf();
    c.views = views;
    c.estimator.image_size = [32, 32];
    c.estimator.widths = [4, 4, 6, 6];
    c.estimator.feature_channels = 6;
    c.estimator.backbone_channels = 6;
    c.estimator.head_channels = 4;
    c.refiner = RefinerConfig {
        dim: 4,
        heads: 2,
        points: 2,
        self_attention_heads: 2,
        ffn_hidden: 4,
        offset_channels: 3,
        heatmap_embed_hidden: 4,
        offset_hidden: 4,
        refine_hidden: 4,
        head_width: 4,
        ..RefinerConfig::desk()
    };
    c.lifter = LifterConfig { conv_widths: [4, 4, 4, 4], dim: 4, heads: 2, points: 2, delta_hidden: 4, ..LifterConfig::desk() };
    for s in [&mut c.stage1, &mut c.stage2, &mut c.stage3] {
        s.epochs = 2;
        s.batch_size = 3;
        s.decay_epochs = vec![1];
    }
    c.training.eval_batch_size = 4;
    c.resolved().unwrap()
}
