//! Forward/backward numeric kernels behind the graph ops.

use crate::tensor::strides;

/// `c = a·b + beta·c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
    c_rs: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices large enough for the given extents/strides;
    // matrixmultiply only reads a/b and writes within c's extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            c_rs,
            1,
        );
    }
}

/// Shape of `a ⊕ b` under numpy-style trailing-axis broadcasting.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Maps every output flat index to the flat offsets of both operands.
pub(crate) fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(n);
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        res.push((oa, ob));
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    res
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` (N,C,H,W) into a `[C·kh·kw, N·Ho·Wo]` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[n * plane + oy * g.wo..n * plane + (oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] +=
                                    src[n * plane + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One axis of a bilinear resize: for each output position, the two source
/// indices and the weight of the second (half-pixel-centre convention).
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

/// Corner taps of a zero-padded bilinear sample at continuous `(x, y)`:
/// each entry is `(flat offset or None when outside, weight, dweight/dx, dweight/dy)`.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| {
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            Some(yi as usize * w + xi as usize)
        } else {
            None
        }
    };
    [
        (at(x0, y0), (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (at(x0 + 1, y0), fx * (1.0 - fy), 1.0 - fy, -fx),
        (at(x0, y0 + 1), (1.0 - fx) * fy, -fy, 1.0 - fx),
        (at(x0 + 1, y0 + 1), fx * fy, fy, fx),
    ]
}
