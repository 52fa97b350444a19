//! Naive loop implementations used as independent oracles.
//!
//! Nothing here shares code with the optimized kernels: every value is read
//! through the bounds-checked [`Tensor::at`] accessor and padding is handled
//! by signed index arithmetic. Slow by design; keep shapes small.

use crate::error::{dim_err, Result};
use crate::{Scalar, Tensor};

fn tap<S: Scalar>(x: &Tensor<S>, n: usize, c: usize, t: isize, h: isize, w: isize) -> Result<S> {
    let [_, _, tt, hh, ww] = x.video_dims()?;
    if t < 0 || h < 0 || w < 0 || t >= tt as isize || h >= hh as isize || w >= ww as isize {
        return Ok(S::zero());
    }
    x.at(&[n, c, t as usize, h as usize, w as usize])
}

/// Direct 3D cross-correlation with zero padding; `w: [Co, Ci, kt, kh, kw]`.
pub fn conv3d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor<S>> {
    let [n, ci, t, h, wd] = x.video_dims()?;
    let [co, wci, kt, kh, kw] = match *w.shape() {
        [a, b, c, d, e] => [a, b, c, d, e],
        _ => return Err(dim_err!("reference conv3d: bad kernel {:?}", w.shape())),
    };
    if wci != ci {
        return Err(dim_err!("reference conv3d: channel mismatch"));
    }
    let out = |i: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let padded = (i + 2 * p) as isize - k as isize;
        if padded < 0 {
            return Err(dim_err!("reference conv3d: kernel larger than input"));
        }
        Ok(padded as usize / s + 1)
    };
    let (to, ho, wo) = (out(t, kt, stride[0], pad[0])?, out(h, kh, stride[1], pad[1])?, out(wd, kw, stride[2], pad[2])?);
    let mut y = Tensor::zeros(&[n, co, to, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = S::zero();
                        for i in 0..ci {
                            for a in 0..kt {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let it = (ot * stride[0] + a) as isize - pad[0] as isize;
                                        let ih = (oh * stride[1] + p) as isize - pad[1] as isize;
                                        let iw = (ow * stride[2] + q) as isize - pad[2] as isize;
                                        acc += w.at(&[o, i, a, p, q])? * tap(x, b, i, it, ih, iw)?;
                                    }
                                }
                            }
                        }
                        y.set(&[b, o, ot, oh, ow], acc)?;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Per-frame 2D convolution with one shared kernel `w: [Co, Ci, k, k]`.
pub fn conv2d_per_frame<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let [co, ci, kh, kw] = match *w.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(dim_err!("reference conv2d: bad kernel {:?}", w.shape())),
    };
    conv3d(x, &w.reshape(&[co, ci, 1, kh, kw])?, [1, stride, stride], [0, pad, pad])
}

/// Per-frame 2D convolution where sample `n`, frame `t` uses `w[n, t]`.
pub fn conv2d_frame_kernels<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let [n, ci, t, h, wd] = x.video_dims()?;
    let [wn, wt, co, wci, k, _] = match *w.shape() {
        [a, b, c, d, e, f] => [a, b, c, d, e, f],
        _ => return Err(dim_err!("reference frame kernels: bad kernel {:?}", w.shape())),
    };
    if wn != n || wt != t || wci != ci {
        return Err(dim_err!("reference frame kernels: shape mismatch"));
    }
    let mut frames = Vec::new();
    for b in 0..n {
        for f in 0..t {
            let xf = Tensor::from_fn(&[1, ci, 1, h, wd], |i| x.at(&[b, i[1], f, i[3], i[4]]).unwrap());
            let wf = Tensor::from_fn(&[co, ci, k, k], |i| w.at(&[b, f, i[0], i[1], i[2], i[3]]).unwrap());
            frames.push(conv2d_per_frame(&xf, &wf, stride, pad)?);
        }
    }
    let [_, _, _, ho, wo] = frames[0].video_dims()?;
    Ok(Tensor::from_fn(&[n, co, t, ho, wo], |i| {
        frames[i[0] * t + i[2]].at(&[0, i[1], 0, i[3], i[4]]).unwrap()
    }))
}

/// 1D cross-correlation along T, `v: [N, C, T]`, `w: [Co, C, k]`.
pub fn conv1d<S: Scalar>(v: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let (n, c, t) = match *v.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(dim_err!("reference conv1d: bad input {:?}", v.shape())),
    };
    let (co, k) = match *w.shape() {
        [a, b, kk] if b == c => (a, kk),
        _ => return Err(dim_err!("reference conv1d: bad kernel {:?}", w.shape())),
    };
    let to = (t + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[n, co, to]);
    for b in 0..n {
        for o in 0..co {
            for ot in 0..to {
                let mut acc = S::zero();
                for i in 0..c {
                    for j in 0..k {
                        let src = (ot * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.at(&[o, i, j])? * v.at(&[b, i, src as usize])?;
                        }
                    }
                }
                y.set(&[b, o, ot], acc)?;
            }
        }
    }
    Ok(y)
}

/// `y_t = sum_j beta[c, j] * x_{t + j - (kt - 1) / 2}` with zero frames outside the clip.
pub fn depthwise_temporal<S: Scalar>(x: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, t, h, w] = x.video_dims()?;
    let kt = beta.shape()[1];
    let half = (kt as isize - 1) / 2;
    let mut y = Tensor::zeros(&[n, c, t, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for f in 0..t {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = S::zero();
                        for tap_i in 0..kt {
                            let src = f as isize + tap_i as isize - half;
                            acc += beta.at(&[ch, tap_i])? * tap(x, b, ch, src, i as isize, j as isize)?;
                        }
                        y.set(&[b, ch, f, i, j], acc)?;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn gap_spatial<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, t, h, w] = x.video_dims()?;
    let mut y = Tensor::zeros(&[n, c, t]);
    for b in 0..n {
        for ch in 0..c {
            for f in 0..t {
                let mut acc = S::zero();
                for i in 0..h {
                    for j in 0..w {
                        acc += x.at(&[b, ch, f, i, j])?;
                    }
                }
                y.set(&[b, ch, f], acc / S::from_count(h * w))?;
            }
        }
    }
    Ok(y)
}

pub fn gap_spatiotemporal<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, t, h, w] = x.video_dims()?;
    let mut y = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = S::zero();
            for f in 0..t {
                for i in 0..h {
                    for j in 0..w {
                        acc += x.at(&[b, ch, f, i, j])?;
                    }
                }
            }
            y.set(&[b, ch], acc / S::from_count(t * h * w))?;
        }
    }
    Ok(y)
}

/// Same-length temporal pooling with edge replication; `reduce` folds the
/// `k` replicated window values of one output position.
pub fn temporal_pool<S: Scalar>(x: &Tensor<S>, k: usize, reduce: impl Fn(&[S]) -> S) -> Result<Tensor<S>> {
    let [n, c, t, h, w] = x.video_dims()?;
    let left = (k as isize - 1) / 2;
    let mut y = Tensor::zeros(&[n, c, t, h, w]);
    let mut window = Vec::with_capacity(k);
    for b in 0..n {
        for ch in 0..c {
            for f in 0..t {
                for i in 0..h {
                    for j in 0..w {
                        window.clear();
                        for a in 0..k as isize {
                            let src = (f as isize + a - left).clamp(0, t as isize - 1) as usize;
                            window.push(x.at(&[b, ch, src, i, j])?);
                        }
                        y.set(&[b, ch, f, i, j], reduce(&window))?;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn temporal_avg_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    temporal_pool(x, k, |w| w.iter().copied().sum::<S>() / S::from_count(w.len()))
}

pub fn temporal_max_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    temporal_pool(x, k, |w| w.iter().copied().fold(S::neg_infinity(), S::max))
}

/// Batch normalization with batch statistics over all axes except 1.
pub fn batch_norm_train<S: Scalar>(x: &Tensor<S>, gamma: &[S], beta: &[S], eps: S) -> Result<Tensor<S>> {
    let c = x.shape()[1];
    let mut sums = vec![S::zero(); c];
    let mut counts = vec![0usize; c];
    let shape = x.shape().to_vec();
    let _ = Tensor::from_fn(&shape, |i| {
        sums[i[1]] += x.at(i).unwrap();
        counts[i[1]] += 1;
        S::zero()
    });
    let mean: Vec<S> = sums.iter().zip(&counts).map(|(&s, &n)| s / S::from_count(n)).collect();
    let mut sq = vec![S::zero(); c];
    let _ = Tensor::from_fn(&shape, |i| {
        let d = x.at(i).unwrap() - mean[i[1]];
        sq[i[1]] += d * d;
        S::zero()
    });
    let var: Vec<S> = sq.iter().zip(&counts).map(|(&s, &n)| s / S::from_count(n)).collect();
    Ok(Tensor::from_fn(&shape, |i| {
        let ch = i[1];
        gamma[ch] * (x.at(i).unwrap() - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
    }))
}
