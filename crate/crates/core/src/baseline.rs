//! Static video operators and the calibrated-weight reading of temporal convolution.
//!
//! A depthwise temporal convolution stacked on a spatial convolution,
//!
//! ```text
//! x~_t = b1 . act(W * x_{t-1}) + b2 . act(W * x_t) + b3 . act(W * x_{t+1})
//! ```
//!
//! is the same computation as spatial convolutions whose kernels are
//! rescaled per frame (no activation: `W_{t+j} = b_j . W`) or, with a ReLU in
//! between, per frame *and* per output location
//! (`W_{t+j}^{(i,j)} = b_j . M_{t+j}^{(i,j)} . W`, where `M` is the ReLU's active
//! set). [`temporal_conv_equivalence_oracle`] evaluates both sides literally.

use crate::error::{dim_err, param_err, Result};
use crate::{ops, Scalar, Tape, Tensor};

/// Per-channel depthwise temporal filter `beta: [C, kt]`, `kt` odd.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKernel<S> {
    beta: Tensor<S>,
}

impl<S: Scalar> TemporalKernel<S> {
    pub fn new(beta: Tensor<S>) -> Result<Self> {
        match *beta.shape() {
            [_, kt] if kt % 2 == 1 => Ok(TemporalKernel { beta }),
            [_, kt] => Err(param_err!("temporal kernel size {} must be odd", kt)),
            _ => Err(dim_err!("temporal kernel must be [C, kt], got {:?}", beta.shape())),
        }
    }

    /// The same taps for every channel.
    pub fn uniform(channels: usize, taps: &[S]) -> Result<Self> {
        let data = (0..channels).flat_map(|_| taps.iter().copied()).collect();
        Self::new(Tensor::new(&[channels, taps.len()], data)?)
    }

    pub fn beta(&self) -> &Tensor<S> {
        &self.beta
    }

    pub fn channels(&self) -> usize {
        self.beta.shape()[0]
    }

    pub fn taps(&self) -> usize {
        self.beta.shape()[1]
    }

    fn tap(&self, c: usize, j: usize) -> S {
        self.beta.data()[c * self.taps() + j]
    }
}

/// ReLU active set of a pre-activation: 1 where the value is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask<S> {
    m: Tensor<S>,
}

impl<S: Scalar> BinaryMask<S> {
    pub fn of(pre_activation: &Tensor<S>) -> Self {
        BinaryMask { m: pre_activation.map(|v| if v > S::zero() { S::one() } else { S::zero() }) }
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.m
    }
}

/// `y_t = sum_j beta_j . x_{t + j - (kt - 1) / 2}` per channel, zero frames
/// outside the clip.
pub fn depthwise_temporal_conv<S: Scalar>(x: &Tensor<S>, beta: &TemporalKernel<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (xv, bv) = (tape.constant(x.clone()), tape.constant(beta.beta.clone()));
    let y = tape.depthwise_temporal(xv, bv)?;
    Ok(tape.value(y).clone())
}

/// Spatial convolution followed by a depthwise temporal convolution, with an
/// optional ReLU in between.
pub fn r2plus1d_forward<S: Scalar>(
    x: &Tensor<S>,
    w_spatial: &Tensor<S>,
    beta: &TemporalKernel<S>,
    stride: usize,
    pad: usize,
    with_activation: bool,
) -> Result<Tensor<S>> {
    let z = ops::conv2d_per_frame(x, w_spatial, stride, pad)?;
    let z = if with_activation { ops::relu(&z) } else { z };
    depthwise_temporal_conv(&z, beta)
}

fn check_beta<S: Scalar>(w: &Tensor<S>, beta: &TemporalKernel<S>) -> Result<()> {
    if beta.channels() != w.shape()[0] {
        return Err(dim_err!(
            "temporal kernel has {} channels but spatial kernel produces {}",
            beta.channels(),
            w.shape()[0]
        ));
    }
    Ok(())
}

/// Frame `t` of sample `n` as a one-frame clip.
fn frame<S: Scalar>(x: &Tensor<S>, n: usize, t: usize) -> Result<Tensor<S>> {
    let [_, c, _, h, w] = x.video_dims()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let off = x.offset(&[n, ch, t, 0, 0])?;
        data.extend_from_slice(&x.data()[off..off + plane]);
    }
    Tensor::new(&[1, c, 1, h, w], data)
}

/// No-activation rewrite: each output frame is a sum of spatial convolutions
/// of neighbouring frames with kernels `beta_j . W`.
pub fn grouped_calibrated_form<S: Scalar>(
    x: &Tensor<S>,
    w_spatial: &Tensor<S>,
    beta: &TemporalKernel<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    check_beta(w_spatial, beta)?;
    let [n, _, t, _, _] = x.video_dims()?;
    let co = w_spatial.shape()[0];
    let per_co: usize = w_spatial.numel() / co;
    let kt = beta.taps();
    let half = (kt - 1) / 2;
    // W_j = beta_j . W, scaling each output-channel row
    let kernels: Vec<Tensor<S>> = (0..kt)
        .map(|j| {
            let data = w_spatial.data().iter().enumerate().map(|(i, &v)| beta.tap(i / per_co, j) * v).collect();
            Tensor::new(w_spatial.shape(), data).expect("same shape as spatial kernel")
        })
        .collect();
    let mut frames = Vec::with_capacity(n * t);
    for b in 0..n {
        for f in 0..t {
            let mut acc: Option<Tensor<S>> = None;
            for (j, wj) in kernels.iter().enumerate() {
                let src = f + j;
                if src < half || src - half >= t {
                    continue;
                }
                let y = ops::conv2d_per_frame(&frame(x, b, src - half)?, wj, stride, pad)?;
                acc = Some(match acc {
                    Some(a) => a.add(&y)?,
                    None => y,
                });
            }
            frames.push(acc);
        }
    }
    let (ho, wo) = {
        let probe = ops::conv2d_per_frame(&frame(x, 0, 0)?, w_spatial, stride, pad)?;
        (probe.shape()[3], probe.shape()[4])
    };
    let mut y = Tensor::zeros(&[n, co, t, ho, wo]);
    for b in 0..n {
        for f in 0..t {
            if let Some(fr) = &frames[b * t + f] {
                for c in 0..co {
                    for i in 0..ho {
                        for j in 0..wo {
                            y.set(&[b, c, f, i, j], fr.at(&[0, c, 0, i, j])?)?;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// With-activation rewrite: every output location `(c, t, i, j)` is computed
/// with its own kernel `beta_k[c] . M_{t'}[c, i, j] . W[c]` applied to the
/// receptive field of the contributing frame `t'`.
pub fn masked_calibrated_form<S: Scalar>(
    x: &Tensor<S>,
    w_spatial: &Tensor<S>,
    beta: &TemporalKernel<S>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, BinaryMask<S>)> {
    check_beta(w_spatial, beta)?;
    let z = ops::conv2d_per_frame(x, w_spatial, stride, pad)?;
    let mask = BinaryMask::of(&z);
    let [n, ci, t, h, wd] = x.video_dims()?;
    let [_, co, _, ho, wo] = z.video_dims()?;
    let k = w_spatial.shape()[2];
    let kt = beta.taps();
    let half = (kt - 1) as isize / 2;
    let mut y = Tensor::zeros(&[n, co, t, ho, wo]);
    for b in 0..n {
        for c in 0..co {
            for f in 0..t {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = S::zero();
                        for tap in 0..kt {
                            let src = f as isize + tap as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            let gate = beta.tap(c, tap) * mask.m.at(&[b, c, src, i, j])?;
                            // location-specific kernel W_src^{(i,j)} = gate . W[c]
                            for a in 0..ci {
                                for p in 0..k {
                                    for q in 0..k {
                                        let ih = (i * stride + p) as isize - pad as isize;
                                        let iw = (j * stride + q) as isize - pad as isize;
                                        if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        let w_loc = gate * w_spatial.at(&[c, a, p, q])?;
                                        acc += w_loc * x.at(&[b, a, src, ih as usize, iw as usize])?;
                                    }
                                }
                            }
                        }
                        y.set(&[b, c, f, i, j], acc)?;
                    }
                }
            }
        }
    }
    Ok((y, mask))
}

/// Both sides of the temporal-convolution rewrite and their distance.
#[derive(Debug, Clone)]
pub struct EquivalenceReport<S> {
    pub lhs: Tensor<S>,
    pub rhs: Tensor<S>,
    pub max_abs_diff: S,
}

/// `lhs`: spatial conv, ReLU, depthwise temporal conv computed directly.
/// `rhs`: the same quantity from location-adaptive calibrated kernels built
/// from the ReLU mask.
pub fn temporal_conv_equivalence_oracle<S: Scalar>(
    x: &Tensor<S>,
    w_spatial: &Tensor<S>,
    beta: &TemporalKernel<S>,
    stride: usize,
    pad: usize,
) -> Result<EquivalenceReport<S>> {
    let lhs = r2plus1d_forward(x, w_spatial, beta, stride, pad, true)?;
    let (rhs, _) = masked_calibrated_form(x, w_spatial, beta, stride, pad)?;
    let max_abs_diff = lhs.max_abs_diff(&rhs)?;
    Ok(EquivalenceReport { lhs, rhs, max_abs_diff })
}

/// The activation-free counterpart of [`temporal_conv_equivalence_oracle`].
pub fn grouped_equivalence_oracle<S: Scalar>(
    x: &Tensor<S>,
    w_spatial: &Tensor<S>,
    beta: &TemporalKernel<S>,
    stride: usize,
    pad: usize,
) -> Result<EquivalenceReport<S>> {
    let lhs = r2plus1d_forward(x, w_spatial, beta, stride, pad, false)?;
    let rhs = grouped_calibrated_form(x, w_spatial, beta, stride, pad)?;
    let max_abs_diff = lhs.max_abs_diff(&rhs)?;
    Ok(EquivalenceReport { lhs, rhs, max_abs_diff })
}

/// Direct 3D convolution, zero padding in all three dimensions.
pub fn conv3d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv3d(xv, wv, stride, pad)?;
    Ok(tape.value(y).clone())
}

/// Channel counts moved forward / backward in time for given fractions of `c`.
pub fn shift_groups(c: usize, fraction_fwd: f64, fraction_bwd: f64) -> Result<(usize, usize)> {
    for f in [fraction_fwd, fraction_bwd] {
        if !(0.0..=0.5).contains(&f) {
            return Err(param_err!("shift fraction {} outside [0, 0.5]", f));
        }
    }
    let n_fwd = (fraction_fwd * c as f64).floor() as usize;
    let n_bwd = (fraction_bwd * c as f64).floor() as usize;
    if n_fwd + n_bwd > c {
        return Err(param_err!("shift groups {} + {} overlap within {} channels", n_fwd, n_bwd, c));
    }
    Ok((n_fwd, n_bwd))
}

/// Temporal shift: the first `floor(fraction_fwd * C)` channels are delayed by
/// one frame, the next `floor(fraction_bwd * C)` advanced by one, zero-filled.
pub fn temporal_shift<S: Scalar>(x: &Tensor<S>, fraction_fwd: f64, fraction_bwd: f64) -> Result<Tensor<S>> {
    let [_, c, ..] = x.video_dims()?;
    let (nf, nb) = shift_groups(c, fraction_fwd, fraction_bwd)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.temporal_shift(xv, nf, nb)?;
    Ok(tape.value(y).clone())
}
