//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node. [`Graph::backward`] then walks the tape in
//! reverse. Nodes that depend on no gradient-requiring leaf are skipped, so
//! frozen sub-networks cost a forward pass only.

pub(crate) mod kernels;

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::tensor::{strides, Tensor};
use kernels::{
    bilinear_taps, broadcast_offsets, broadcast_shape, col2im, gemm, im2col, resize_taps, ConvGeom,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Relu { x: Var },
    Silu { x: Var },
    Sqrt { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Resize { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumAll { x: Var },
    SumAxis { x: Var, axis: usize },
    GlobalAvgPool { x: Var },
    BilinearSample { feature: Var, coords: Var },
    DeformSample { value: Var, loc: Var, attn: Var },
    Fisheye { x: Var, focal: f64, fov_limit: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Which named parameters receive gradients when bound into a graph.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    None,
    /// Parameters whose names start with any of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// An eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which no bound parameter requires a gradient.
    pub fn inference() -> Self {
        Self { trainable: Trainable::None, ..Self::default() }
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self { trainable, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated binds of one name return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let needs = self.trainable.includes(name);
        let v = self.push(value.clone(), Op::Leaf, needs);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---------------------------------------------------------------- ops

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let value = if sa == sb {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            Tensor::from_parts(sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let Some(out) = broadcast_shape(&sa, &sb) else {
                return shape_err(format!("cannot broadcast {sa:?} with {sb:?}"));
            };
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let data = broadcast_offsets(&sa, &sb, &out)
                .into_iter()
                .map(|(i, j)| f(va[i], vb[j]))
                .collect();
            Tensor::from_parts(out, data)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, ng))
    }

    /// Element-wise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Element-wise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, s }, ng)
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return shape_err(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return shape_err(format!("linear: bias {:?} vs out {}", self.shape(b), ws[1]));
            }
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            1.0,
            &mut out,
            n as isize,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, ng))
    }

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is `[..., k, n]`
    /// with identical leading axes, or a plain `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some((batch, m, k, n)) = matmul_dims(&sa, &sb) else {
            return shape_err(format!("matmul: {sa:?} x {sb:?}"));
        };
        let b_shared = sb.len() == 2;
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let bo = if b_shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                k as isize,
                1,
                &vb[bo..],
                n as isize,
                1,
                0.0,
                &mut out[i * m * n..],
                n as isize,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu { x }, ng)
    }

    /// `x·σ(x)`; smooth everywhere, unlike [`Graph::relu`].
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, Op::Silu { x }, ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        let ng = self.needs(x);
        self.push(value, Op::Sqrt { x }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.needs(x);
        self.push(value, Op::Softmax { x }, ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm: feature size {d}"));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let (mu, rstd) = moments(row);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rstd * g[i] + bt[i];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, ng))
    }

    /// 2-D convolution: `x` is `[N, C, H, W]`, `w` is `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        let o = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("conv2d: bias {:?} vs {o} filters", self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut mat = vec![0.0; o * ncols];
        gemm(
            o,
            geom.rows(),
            ncols,
            self.value(w).data(),
            geom.rows() as isize,
            1,
            &cols,
            ncols as isize,
            1,
            0.0,
            &mut mat,
            ncols as isize,
        );
        let plane = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.n * o * plane];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..geom.n {
            for oc in 0..o {
                let src = &mat[oc * ncols + n * plane..oc * ncols + (n + 1) * plane];
                let dst = &mut out[(n * o + oc) * plane..(n * o + oc + 1) * plane];
                let bb = bias.as_ref().map_or(0.0, |b| b[oc]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bb;
                }
            }
        }
        let value = Tensor::from_parts(vec![geom.n, o, geom.ho, geom.wo], out);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return shape_err(format!("conv2d: input {xs:?} vs weight {ws:?}"));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel {kh}x{kw} larger than padded input"));
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return shape_err(format!("resize: input {xs:?}"));
        }
        let (h, w) = (xs[2], xs[3]);
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let planes = xs[0] * xs[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - lx) + s[y0 * w + x1] * lx;
                    let bot = s[y1 * w + x0] * (1.0 - lx) + s[y1 * w + x1] * lx;
                    d[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Resize { x }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute: axes {axes:?} for shape {xs:?}"));
        }
        let value = permute_tensor(self.value(x), axes);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!("concat: {s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.dim(axis) * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return shape_err(format!("narrow {start}+{len} on axis {axis} of {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return shape_err(format!("sum_axis {axis} of {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..xs[axis] {
                let s = &src[(o * xs[axis] + a) * inner..(o * xs[axis] + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, ng))
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("global_avg_pool: {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![xs[0], xs[1]], out), Op::GlobalAvgPool { x }, ng))
    }

    /// Zero-padded bilinear sampling of a `[C, H, W]` grid at `[P, 2]`
    /// continuous `(x, y)` pixel coordinates, giving `[P, C]`.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let cs = self.shape(coords).to_vec();
        if fs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return shape_err(format!("bilinear_sample: feature {fs:?}, coords {cs:?}"));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let f = self.value(feature).data();
        let xy = self.value(coords).data();
        let mut out = vec![0.0; cs[0] * c];
        for p in 0..cs[0] {
            let taps = bilinear_taps(xy[2 * p], xy[2 * p + 1], h, w);
            for ch in 0..c {
                let plane = &f[ch * h * w..(ch + 1) * h * w];
                out[p * c + ch] = taps
                    .iter()
                    .filter_map(|&(o, wt, _, _)| o.map(|o| plane[o] * wt))
                    .sum();
            }
        }
        let ng = self.needs(feature) || self.needs(coords);
        Ok(self.push(Tensor::from_parts(vec![cs[0], c], out), Op::BilinearSample { feature, coords }, ng))
    }

    /// Multi-head, multi-point weighted bilinear sampling, the core of
    /// deformable attention.
    ///
    /// * `value`: `[N, M, D, H, W]` per-head value maps
    /// * `loc`:   `[N, Q, M, K, 2]` sampling positions `(x, y)` in pixels
    /// * `attn`:  `[N, Q, M, K]` point weights
    ///
    /// Output `[N, Q, M·D]`, head-major: `out[n,q,m·D+d] = Σ_k attn·sample`.
    pub fn deform_sample(&mut self, value: Var, loc: Var, attn: Var) -> Result<Var> {
        let vs = self.shape(value).to_vec();
        let ls = self.shape(loc).to_vec();
        let as_ = self.shape(attn).to_vec();
        if vs.len() != 5
            || ls.len() != 5
            || as_.len() != 4
            || ls[4] != 2
            || ls[0] != vs[0]
            || ls[2] != vs[1]
            || as_[..] != ls[..4]
        {
            return shape_err(format!("deform_sample: value {vs:?}, loc {ls:?}, attn {as_:?}"));
        }
        let (n, m, d, h, w) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
        let (q, k) = (ls[1], ls[3]);
        let val = self.value(value).data();
        let lv = self.value(loc).data();
        let av = self.value(attn).data();
        let mut out = vec![0.0; n * q * m * d];
        for ni in 0..n {
            for qi in 0..q {
                for mi in 0..m {
                    let o = &mut out[((ni * q + qi) * m + mi) * d..((ni * q + qi) * m + mi + 1) * d];
                    let vbase = (ni * m + mi) * d * h * w;
                    for ki in 0..k {
                        let pi = ((ni * q + qi) * m + mi) * k + ki;
                        let a = av[pi];
                        let taps = bilinear_taps(lv[2 * pi], lv[2 * pi + 1], h, w);
                        for &(off, wt, _, _) in &taps {
                            if let Some(off) = off {
                                let s = a * wt;
                                for (di, od) in o.iter_mut().enumerate() {
                                    *od += s * val[vbase + di * h * w + off];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(value) || self.needs(loc) || self.needs(attn);
        Ok(self.push(Tensor::from_parts(vec![n, q, m * d], out), Op::DeformSample { value, loc, attn }, ng))
    }

    /// Equidistant fisheye projection of camera-frame points `[..., 3]` to
    /// pixels `[..., 2]`. Points at or beyond `fov_limit` map to `outside` and
    /// pass no gradient.
    pub fn fisheye_project(&mut self, x: Var, focal: f64, principal: [f64; 2], fov_limit: f64, outside: [f64; 2]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&3) {
            return shape_err(format!("fisheye_project: points {xs:?}"));
        }
        let mut out = Vec::with_capacity(self.value(x).len() / 3 * 2);
        for p in self.value(x).data().chunks(3) {
            match fisheye_jacobian(p, focal, fov_limit) {
                Some((off, _)) => out.extend([principal[0] + off[0], principal[1] + off[1]]),
                None => out.extend(outside),
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = 2;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Fisheye { x, focal, fov_limit }, ng))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut result: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                result[i] = Some(g);
            }
        }
        Ok(Gradients { grads: result })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `accum` but lazily builds the gradient only when needed.
    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.needs(v) {
            let g = f();
            self.accum(grads, v, g);
        }
    }

    fn backprop_node(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.scale(-1.0)),
                    BinaryKind::Mul => {
                        if va.shape() == vb.shape() {
                            let ga = zip_map(g, vb, |x, y| x * y);
                            let gb = zip_map(g, va, |x, y| x * y);
                            (ga, gb)
                        } else {
                            let offs = broadcast_offsets(va.shape(), vb.shape(), g.shape());
                            let mut ga = Tensor::zeros(va.shape());
                            let mut gb = Tensor::zeros(vb.shape());
                            for (o, &(i, j)) in offs.iter().enumerate() {
                                ga.data_mut()[i] += g.data()[o] * vb.data()[j];
                                gb.data_mut()[j] += g.data()[o] * va.data()[i];
                            }
                            self.accum(grads, *a, ga);
                            self.accum(grads, *b, gb);
                            return;
                        }
                    }
                };
                let ga = reduce_to(ga, va.shape());
                let gb = reduce_to(gb, vb.shape());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Scale { x, s } => self.accum(grads, *x, g.scale(*s)),
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (k, n) = (wv.dim(0), wv.dim(1));
                let rows = g.len() / n.max(1);
                self.accum_with(grads, *x, || {
                    let mut dx = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), n as isize, 1, wv.data(), 1, n as isize, 0.0, &mut dx, k as isize);
                    Tensor::from_parts(self.shape(*x).to_vec(), dx)
                });
                self.accum_with(grads, *w, || {
                    let xv = self.value(*x);
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, xv.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut dw, n as isize);
                    Tensor::from_parts(vec![k, n], dw)
                });
                if let Some(b) = b {
                    self.accum_with(grads, *b, || {
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_parts(vec![n], db)
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape()).unwrap();
                let b_shared = vb.rank() == 2;
                self.accum_with(grads, *a, || {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bo = if b_shared { 0 } else { i * k * n };
                        gemm(m, n, k, &g.data()[i * m * n..], n as isize, 1, &vb.data()[bo..], 1, n as isize, 0.0, &mut da[i * m * k..], k as isize);
                    }
                    Tensor::from_parts(va.shape().to_vec(), da)
                });
                self.accum_with(grads, *b, || {
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..batch {
                        let bo = if b_shared { 0 } else { i * k * n };
                        let beta = if b_shared && i > 0 { 1.0 } else { 0.0 };
                        gemm(k, m, n, &va.data()[i * m * k..], 1, k as isize, &g.data()[i * m * n..], n as isize, 1, beta, &mut db[bo..], n as isize);
                    }
                    Tensor::from_parts(vb.shape().to_vec(), db)
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                self.accum(grads, *x, zip_map(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                self.accum(
                    grads,
                    *x,
                    zip_map(g, xv, |gv, v| {
                        let sig = 1.0 / (1.0 + (-v).exp());
                        gv * sig * (1.0 + v * (1.0 - sig))
                    }),
                );
            }
            Op::Sqrt { x } => {
                self.accum(grads, *x, zip_map(g, out, |gv, y| 0.5 * gv / y));
            }
            Op::Softmax { x } => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; out.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for ((xr, gr), dr) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mu, rstd) = moments(xr);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rstd;
                        let dxhat = gr[i] * gm[i];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dg[i] += gr[i] * xhat;
                        db[i] += gr[i];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for i in 0..d {
                        let xhat = (xr[i] - mu) * rstd;
                        dr[i] = rstd * (gr[i] * gm[i] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                self.accum(grads, *gamma, Tensor::from_parts(vec![d], dg));
                self.accum(grads, *beta, Tensor::from_parts(vec![d], db));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(*x, *w, *stride, *pad).unwrap();
                let wv = self.value(*w);
                let o = wv.dim(0);
                let plane = geom.ho * geom.wo;
                let ncols = geom.cols();
                // [N, O, P] -> [O, N·P]
                let mut gm = vec![0.0; o * ncols];
                for n in 0..geom.n {
                    for oc in 0..o {
                        gm[oc * ncols + n * plane..oc * ncols + (n + 1) * plane]
                            .copy_from_slice(&g.data()[(n * o + oc) * plane..(n * o + oc + 1) * plane]);
                    }
                }
                if let Some(b) = b {
                    self.accum_with(grads, *b, || {
                        Tensor::from_parts(vec![o], gm.chunks(ncols).map(|r| r.iter().sum()).collect())
                    });
                }
                let rows = geom.rows();
                if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), &geom);
                    let mut dw = vec![0.0; o * rows];
                    gemm(o, ncols, rows, &gm, ncols as isize, 1, &cols, 1, ncols as isize, 0.0, &mut dw, rows as isize);
                    self.accum(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                self.accum_with(grads, *x, || {
                    let mut dcols = vec![0.0; rows * ncols];
                    gemm(rows, o, ncols, wv.data(), 1, rows as isize, &gm, ncols as isize, 1, 0.0, &mut dcols, ncols as isize);
                    let mut dx = vec![0.0; geom.n * geom.c * geom.h * geom.w];
                    col2im(&dcols, &geom, &mut dx);
                    Tensor::from_parts(self.shape(*x).to_vec(), dx)
                });
            }
            Op::Resize { x } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (out.dim(2), out.dim(3));
                let ty = resize_taps(h, oh);
                let tx = resize_taps(w, ow);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, gp) in g.data().chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            d[y1 * w + x0] += gv * ly * (1.0 - lx);
                            d[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.shape(*x)).unwrap();
                self.accum(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accum(grads, *x, permute_tensor(g, &inv));
            }
            Op::Concat { xs, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let total = out.dim(*axis);
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accum(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = out.dim(*axis);
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::SumAll { x } => {
                self.accum(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    for a in 0..xs[*axis] {
                        d[(o * xs[*axis] + a) * inner..(o * xs[*axis] + a + 1) * inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::BilinearSample { feature, coords } => {
                let fv = self.value(*feature);
                let cv = self.value(*coords);
                let (c, h, w) = (fv.dim(0), fv.dim(1), fv.dim(2));
                let np = cv.dim(0);
                let mut df = vec![0.0; fv.len()];
                let mut dc = vec![0.0; cv.len()];
                for p in 0..np {
                    let taps = bilinear_taps(cv.data()[2 * p], cv.data()[2 * p + 1], h, w);
                    for ch in 0..c {
                        let gv = g.data()[p * c + ch];
                        for &(off, wt, dwx, dwy) in &taps {
                            if let Some(off) = off {
                                let idx = ch * h * w + off;
                                df[idx] += gv * wt;
                                dc[2 * p] += gv * dwx * fv.data()[idx];
                                dc[2 * p + 1] += gv * dwy * fv.data()[idx];
                            }
                        }
                    }
                }
                self.accum(grads, *feature, Tensor::from_parts(fv.shape().to_vec(), df));
                self.accum(grads, *coords, Tensor::from_parts(cv.shape().to_vec(), dc));
            }
            Op::DeformSample { value, loc, attn } => {
                let vv = self.value(*value);
                let lv = self.value(*loc);
                let av = self.value(*attn);
                let vs = vv.shape();
                let (n, m, d, h, w) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
                let (q, k) = (lv.dim(1), lv.dim(3));
                let need_v = self.needs(*value);
                let mut dv = if need_v { vec![0.0; vv.len()] } else { Vec::new() };
                let mut dl = vec![0.0; lv.len()];
                let mut da = vec![0.0; av.len()];
                let val = vv.data();
                for ni in 0..n {
                    for qi in 0..q {
                        for mi in 0..m {
                            let go = &g.data()[((ni * q + qi) * m + mi) * d..((ni * q + qi) * m + mi + 1) * d];
                            let vbase = (ni * m + mi) * d * h * w;
                            for ki in 0..k {
                                let pi = ((ni * q + qi) * m + mi) * k + ki;
                                let a = av.data()[pi];
                                let taps = bilinear_taps(lv.data()[2 * pi], lv.data()[2 * pi + 1], h, w);
                                let (mut ga, mut gx, mut gy) = (0.0, 0.0, 0.0);
                                for &(off, wt, dwx, dwy) in &taps {
                                    let Some(off) = off else { continue };
                                    for (di, &gv) in go.iter().enumerate() {
                                        let idx = vbase + di * h * w + off;
                                        let v = val[idx];
                                        ga += gv * wt * v;
                                        gx += gv * dwx * v;
                                        gy += gv * dwy * v;
                                        if need_v {
                                            dv[idx] += gv * a * wt;
                                        }
                                    }
                                }
                                da[pi] = ga;
                                dl[2 * pi] = gx * a;
                                dl[2 * pi + 1] = gy * a;
                            }
                        }
                    }
                }
                if need_v {
                    self.accum(grads, *value, Tensor::from_parts(vs.to_vec(), dv));
                }
                self.accum(grads, *loc, Tensor::from_parts(lv.shape().to_vec(), dl));
                self.accum(grads, *attn, Tensor::from_parts(av.shape().to_vec(), da));
            }
            Op::Fisheye { x, focal, fov_limit } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for ((p, gp), d) in xv.data().chunks(3).zip(g.data().chunks(2)).zip(dx.chunks_mut(3)) {
                    if let Some((_, jac)) = fisheye_jacobian(p, *focal, *fov_limit) {
                        for (c, dv) in d.iter_mut().enumerate() {
                            *dv = gp[0] * jac[0][c] + gp[1] * jac[1][c];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
    }
}

/// Gradients of leaf nodes from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Gradients of every trainable bound parameter, by name.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params
            .iter()
            .filter(|(_, &v)| graph.needs(v))
            .map(|(name, &v)| (name.clone(), self.get_or_zeros(graph, v)))
            .collect()
    }
}

/// Pixel offset from the principal point of camera-frame point `p` and its
/// Jacobian `d(u, v)/d(x, y, z)`; `None` outside the field of view.
fn fisheye_jacobian(p: &[f64], focal: f64, fov_limit: f64) -> Option<([f64; 2], [[f64; 3]; 2])> {
    let (x, y, z) = (p[0], p[1], p[2]);
    let rho = x.hypot(y);
    if !(rho.is_finite() && z.is_finite()) || (rho == 0.0 && z <= 0.0) {
        return None;
    }
    let theta = rho.atan2(z);
    if theta >= fov_limit {
        return None;
    }
    let r2 = rho * rho + z * z;
    // k = f·θ/ρ scales (x, y); a = (∂k/∂x)/x = (∂k/∂y)/y
    let (k, a) = if rho < 1e-9 {
        (focal / z, -2.0 * focal / (3.0 * z * z * z))
    } else {
        (focal * theta / rho, focal * (z / r2 - theta / rho) / (rho * rho))
    };
    let dz = -focal / r2;
    Some((
        [k * x, k * y],
        [[k + a * x * x, a * x * y, dz * x], [a * x * y, k + a * y * y, dz * y]],
    ))
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return None;
    }
    if sb.len() != 2 && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
        return None;
    }
    let batch = sa[..sa.len() - 2].iter().product();
    Some((batch, m, k, n))
}

fn moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let offs = broadcast_offsets(shape, &[], g.shape());
    let mut out = Tensor::zeros(shape);
    for (o, &(i, _)) in offs.iter().enumerate() {
        out.data_mut()[i] += g.data()[o];
    }
    out
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let src_strides = strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.dim(a)).collect();
    let st: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
