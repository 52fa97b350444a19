//! Raw forward/backward loops over flat row-major buffers.
//!
//! Every convolution in the crate funnels through [`conv_fwd`] / [`conv_bwd`]:
//! a direct 3D cross-correlation whose weight block may be selected per
//! `(sample, output frame)`. Plain per-frame 2D convolution is the `kt = 1`
//! case with a fixed block, TAdaConv is `kt = 1` with one block per frame,
//! and temporal 1D convolution is the `kh = kw = 1` case.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub to: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Output extent of a padded, strided window sweep; `None` when the window
/// does not fit even once.
pub(crate) fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], x: &[S], a: S) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&p, &q)| acc + p * q)
}

/// Output positions `[lo, hi)` whose tap `kidx` lands inside the input.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kidx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kidx { (pad - kidx).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad <= kidx { 0 } else { ((in_len + pad - kidx - 1) / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

/// Visits every in-bounds `(column index, input index)` pair of the unrolled
/// patch matrix for `(n, to)`. Rows follow the weight layout
/// `[ci, kt, kh, kw]`; columns are output positions.
#[inline]
fn for_each_tap(d: &ConvDims, g: &ConvGeom, n: usize, to: usize, mut visit: impl FnMut(usize, usize)) {
    let plane = d.ho * d.wo;
    for ci in 0..d.ci {
        for dt in 0..g.kt {
            let ti = to * g.st + dt;
            if ti < g.pt || ti - g.pt >= d.t {
                continue;
            }
            let ibase = ((n * d.ci + ci) * d.t + ti - g.pt) * d.h * d.w;
            for kh in 0..g.kh {
                let (oh_lo, oh_hi) = valid_range(d.ho, d.h, kh, g.sh, g.ph);
                for kw in 0..g.kw {
                    let (ow_lo, ow_hi) = valid_range(d.wo, d.w, kw, g.sw, g.pw);
                    if ow_lo == ow_hi {
                        continue;
                    }
                    let row = ((ci * g.kt + dt) * g.kh + kh) * g.kw + kw;
                    let iw_lo = ow_lo * g.sw + kw - g.pw;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.sh + kh - g.ph;
                        let col = row * plane + oh * d.wo;
                        let src = ibase + ih * d.w + iw_lo;
                        for (j, ow) in (ow_lo..ow_hi).enumerate() {
                            visit(col + ow, src + j * g.sw);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<S: Scalar>(x: &[S], d: &ConvDims, g: &ConvGeom, n: usize, to: usize, cols: &mut [S]) {
    cols.fill(S::zero());
    for_each_tap(d, g, n, to, |c, i| cols[c] = x[i]);
}

/// Direct 3D cross-correlation. Each `(sample, output frame)` is unrolled
/// into a patch matrix and multiplied by the weight block `wsel(n, to)`.
pub(crate) fn conv_fwd<S: Scalar>(
    x: &[S],
    w: &[S],
    d: &ConvDims,
    g: &ConvGeom,
    wsel: impl Fn(usize, usize) -> usize,
) -> Vec<S> {
    let plane = d.ho * d.wo;
    let rows = d.ci * g.kt * g.kh * g.kw;
    let mut out = vec![S::zero(); d.n * d.co * d.to * plane];
    let mut cols = vec![S::zero(); rows * plane];
    for n in 0..d.n {
        for to in 0..d.to {
            im2col(x, d, g, n, to, &mut cols);
            let wbase = wsel(n, to);
            for co in 0..d.co {
                let obase = ((n * d.co + co) * d.to + to) * plane;
                let oplane = &mut out[obase..obase + plane];
                let wrow = &w[wbase + co * rows..wbase + (co + 1) * rows];
                for (col, &wv) in cols.chunks_exact(plane).zip(wrow) {
                    axpy(oplane, col, wv);
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; `dw` has the length of `w` and accumulates into the
/// block chosen by `wsel` for each `(sample, output frame)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bwd<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    d: &ConvDims,
    g: &ConvGeom,
    wsel: impl Fn(usize, usize) -> usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let plane = d.ho * d.wo;
    let rows = d.ci * g.kt * g.kh * g.kw;
    let mut dx = want_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![S::zero(); w.len()]);
    let mut cols = vec![S::zero(); rows * plane];
    for n in 0..d.n {
        for to in 0..d.to {
            let wbase = wsel(n, to);
            let gplane = |co: usize| {
                let obase = ((n * d.co + co) * d.to + to) * plane;
                &dy[obase..obase + plane]
            };
            if let Some(dw) = dw.as_mut() {
                im2col(x, d, g, n, to, &mut cols);
                for co in 0..d.co {
                    let grad = gplane(co);
                    let drow = &mut dw[wbase + co * rows..wbase + (co + 1) * rows];
                    for (dv, col) in drow.iter_mut().zip(cols.chunks_exact(plane)) {
                        *dv += dot(grad, col);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                cols.fill(S::zero());
                for co in 0..d.co {
                    let grad = gplane(co);
                    let wrow = &w[wbase + co * rows..wbase + (co + 1) * rows];
                    for (col, &wv) in cols.chunks_exact_mut(plane).zip(wrow) {
                        axpy(col, grad, wv);
                    }
                }
                for_each_tap(d, g, n, to, |c, i| dx[i] += cols[c]);
            }
        }
    }
    (dx, dw)
}


/// Depthwise temporal convolution of a `[N, C, T, inner]` buffer with
/// `beta: [C, kt]`, zero padding, same-length output.
pub(crate) fn depthwise_t_fwd<S: Scalar>(x: &[S], beta: &[S], n: usize, c: usize, t: usize, inner: usize, kt: usize) -> Vec<S> {
    let half = (kt - 1) / 2;
    let mut y = vec![S::zero(); x.len()];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * t * inner;
            for tt in 0..t {
                for j in 0..kt {
                    let src = tt + j;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let src = src - half;
                    let b = beta[cc * kt + j];
                    let (o, i) = (base + tt * inner, base + src * inner);
                    for e in 0..inner {
                        y[o + e] += b * x[i + e];
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn depthwise_t_bwd<S: Scalar>(
    x: &[S],
    beta: &[S],
    dy: &[S],
    dims: (usize, usize, usize, usize),
    kt: usize,
) -> (Vec<S>, Vec<S>) {
    let (n, c, t, inner) = dims;
    let half = (kt - 1) / 2;
    let mut dx = vec![S::zero(); x.len()];
    let mut db = vec![S::zero(); beta.len()];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * t * inner;
            for tt in 0..t {
                for j in 0..kt {
                    let src = tt + j;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let src = src - half;
                    let b = beta[cc * kt + j];
                    let (o, i) = (base + tt * inner, base + src * inner);
                    let mut acc = S::zero();
                    for e in 0..inner {
                        dx[i + e] += b * dy[o + e];
                        acc += dy[o + e] * x[i + e];
                    }
                    db[cc * kt + j] += acc;
                }
            }
        }
    }
    (dx, db)
}

/// Source frame of tap `j` for output frame `t` under edge-replicated
/// same-length pooling with window `k`.
#[inline]
pub(crate) fn pool_source(t: usize, j: usize, k: usize, len: usize) -> usize {
    let left = (k - 1) / 2;
    (t + j).saturating_sub(left).min(len - 1)
}

/// Same-length temporal average pooling over axis 2 of `[N, C, T, inner]`.
pub(crate) fn tavg_fwd<S: Scalar>(x: &[S], outer: usize, t: usize, inner: usize, k: usize) -> Vec<S> {
    let inv = S::one() / S::from_count(k);
    let mut y = vec![S::zero(); x.len()];
    for o in 0..outer {
        let base = o * t * inner;
        for tt in 0..t {
            for j in 0..k {
                let s = pool_source(tt, j, k, t);
                for e in 0..inner {
                    y[base + tt * inner + e] += x[base + s * inner + e];
                }
            }
            for e in 0..inner {
                y[base + tt * inner + e] *= inv;
            }
        }
    }
    y
}

pub(crate) fn tavg_bwd<S: Scalar>(dy: &[S], outer: usize, t: usize, inner: usize, k: usize) -> Vec<S> {
    let inv = S::one() / S::from_count(k);
    let mut dx = vec![S::zero(); dy.len()];
    for o in 0..outer {
        let base = o * t * inner;
        for tt in 0..t {
            for j in 0..k {
                let s = pool_source(tt, j, k, t);
                for e in 0..inner {
                    dx[base + s * inner + e] += dy[base + tt * inner + e] * inv;
                }
            }
        }
    }
    dx
}

/// Same-length temporal max pooling. Returns the pooled values, the flat
/// source offset of each winner, and the smallest gap between a winner and
/// the best competing distinct source frame (infinite when a window holds a
/// single frame).
pub(crate) fn tmax_fwd<S: Scalar>(x: &[S], outer: usize, t: usize, inner: usize, k: usize) -> (Vec<S>, Vec<usize>, S) {
    let mut y = vec![S::zero(); x.len()];
    let mut arg = vec![0usize; x.len()];
    let mut margin = S::infinity();
    for o in 0..outer {
        let base = o * t * inner;
        for tt in 0..t {
            for e in 0..inner {
                let mut best_src = pool_source(tt, 0, k, t);
                let mut best = x[base + best_src * inner + e];
                for j in 1..k {
                    let s = pool_source(tt, j, k, t);
                    let v = x[base + s * inner + e];
                    if v > best {
                        best = v;
                        best_src = s;
                    }
                }
                for j in 0..k {
                    let s = pool_source(tt, j, k, t);
                    if s != best_src {
                        margin = margin.min(best - x[base + s * inner + e]);
                    }
                }
                y[base + tt * inner + e] = best;
                arg[base + tt * inner + e] = base + best_src * inner + e;
            }
        }
    }
    (y, arg, margin)
}

/// Per-channel batch statistics over every axis except axis 1 of `[N, C, inner]`.
pub(crate) fn channel_moments<S: Scalar>(x: &[S], n: usize, c: usize, inner: usize) -> (Vec<S>, Vec<S>) {
    let m = S::from_count(n * inner);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for cc in 0..c {
        let mut s = S::zero();
        for nn in 0..n {
            let b = (nn * c + cc) * inner;
            s += x[b..b + inner].iter().copied().sum::<S>();
        }
        let mu = s / m;
        let mut v = S::zero();
        for nn in 0..n {
            let b = (nn * c + cc) * inner;
            for &xv in &x[b..b + inner] {
                v += (xv - mu) * (xv - mu);
            }
        }
        mean[cc] = mu;
        var[cc] = v / m;
    }
    (mean, var)
}
