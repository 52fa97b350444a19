//! Tensor-level entry points for the primitive operators.
//!
//! Each function records a throwaway tape and returns the forward value. Use
//! the [`Tape`] methods directly when gradients are needed.

use crate::error::{param_err, Result};
use crate::params::Mode;
use crate::{Scalar, Tape, Tensor, Var};

fn run<S: Scalar>(inputs: &[&Tensor<S>], f: impl FnOnce(&mut Tape<S>, &[Var]) -> Result<Var>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Each frame of `x: [N, Ci, T, H, W]` convolved with the same `w: [Co, Ci, k, k]`.
pub fn conv2d_per_frame<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    run(&[x, w], |t, v| t.conv2d(v[0], v[1], stride, pad))
}

/// 1D cross-correlation along T of `v: [N, C, T]` with `w: [Co, C, k]`.
pub fn conv1d_temporal<S: Scalar>(v: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    run(&[v, w], |t, x| t.conv1d(x[0], x[1], stride, pad))
}

pub fn gap_spatial<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    run(&[x], |t, v| t.gap_spatial(v[0]))
}

pub fn gap_spatiotemporal<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    run(&[x], |t, v| t.gap_spatiotemporal(v[0]))
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// `x: [N, Ci]`, `w: [Co, Ci]`, optional bias `[Co]`.
pub fn fc<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    match b {
        Some(b) => run(&[x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        None => run(&[x, w], |t, v| t.linear(v[0], v[1], None)),
    }
}

/// Same-length temporal average pooling (stride 1, edge replication).
pub fn temporal_avg_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    run(&[x], |t, v| t.temporal_avg_pool(v[0], k))
}

/// Same-length temporal max pooling (stride 1, edge replication).
pub fn temporal_max_pool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    run(&[x], |t, v| t.temporal_max_pool(v[0], k))
}

/// Stand-alone batch normalization state.
#[derive(Debug, Clone)]
pub struct BatchNormParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub eps: S,
    pub momentum: S,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            eps: S::from_f64_lossy(crate::nn::BN_EPS),
            momentum: S::from_f64_lossy(crate::nn::BN_MOMENTUM),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }
}

/// Batch normalization over axis 1. Train mode normalizes by batch
/// statistics and folds them into the running statistics; eval mode uses the
/// running statistics.
pub fn batchnorm<S: Scalar>(x: &Tensor<S>, p: &mut BatchNormParams<S>, mode: Mode) -> Result<Tensor<S>> {
    if p.eps <= S::zero() {
        return Err(param_err!("batch norm eps must be positive"));
    }
    let c = p.gamma.len();
    let gamma = Tensor::new(&[c], p.gamma.clone())?;
    let beta = Tensor::new(&[c], p.beta.clone())?;
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x.clone()), tape.constant(gamma), tape.constant(beta));
    let out = match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(xv, gv, bv, p.eps)?;
            let m = p.momentum;
            let unbias = if stats.count > 1 {
                S::from_count(stats.count) / S::from_count(stats.count - 1)
            } else {
                S::one()
            };
            for (r, &bm) in p.running_mean.iter_mut().zip(&stats.mean) {
                *r = m * *r + (S::one() - m) * bm;
            }
            for (r, &v) in p.running_var.iter_mut().zip(&stats.var) {
                *r = m * *r + (S::one() - m) * v * unbias;
            }
            y
        }
        Mode::Eval => tape.batch_norm_eval(xv, gv, bv, &p.running_mean, &p.running_var, p.eps)?,
    };
    Ok(tape.value(out).clone())
}
