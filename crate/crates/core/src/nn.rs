//! Parameterised layers bound to a [`ParamStore`].

use rand::Rng;

use crate::error::{param_err, Result};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::{Scalar, Tensor, Var};

/// A layer mapping one recorded value to another.
pub trait Layer<S: Scalar> {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var>;
}

/// He-uniform initialisation, bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Per-frame 2D convolution, bias-free.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, rng);
        let weight = store.add_param(format!("{name}.weight"), w);
        Conv2d { weight, c_in, c_out, k, stride, pad }
    }
}

impl<S: Scalar> Layer<S> for Conv2d {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv2d(x, w, self.stride, self.pad)
    }
}

/// Direct 3D convolution, bias-free; `kernel`, `stride`, `pad` ordered `[t, h, w]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let w = kaiming_uniform(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let weight = store.add_param(format!("{name}.weight"), w);
        Conv3d { weight, c_in, c_out, kernel, stride, pad }
    }
}

impl<S: Scalar> Layer<S> for Conv3d {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv3d(x, w, self.stride, self.pad)
    }
}

/// Temporal 1D convolution over `[N, C, T]`, bias-free, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv1d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(&[c_out, c_in, k], c_in * k, rng);
        let weight = store.add_param(format!("{name}.weight"), w);
        Conv1d { weight, c_in, c_out, k }
    }
}

impl<S: Scalar> Layer<S> for Conv1d {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv1d(x, w, 1, (self.k - 1) / 2)
    }
}

/// Fully connected layer over `[N, Ci]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (c_in.max(1) as f64).sqrt();
        let weight = store.add_param(format!("{name}.weight"), Tensor::rand_uniform(&[c_out, c_in], -bound, bound, rng));
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Linear { weight, bias, c_in, c_out }
    }
}

impl<S: Scalar> Layer<S> for Linear {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

/// Batch normalization over channel axis 1 with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self::with_scale(store, name, channels, S::one())
    }

    /// Scale (`gamma`) initialised to `gamma0`; shift starts at zero.
    pub fn with_scale<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, gamma0: S) -> Self {
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], gamma0));
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
        BatchNorm { gamma, beta, running_mean, running_var, channels, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(param_err!("batch norm eps must be positive, got {}", self.eps));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(param_err!("batch norm momentum must lie in [0, 1], got {}", self.momentum));
        }
        Ok(())
    }
}

impl<S: Scalar> Layer<S> for BatchNorm {
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        self.validate()?;
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let eps = S::from_f64_lossy(self.eps);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm_train(x, g, b, eps)?;
                let m = S::from_f64_lossy(self.momentum);
                let unbias = if stats.count > 1 {
                    S::from_count(stats.count) / S::from_count(stats.count - 1)
                } else {
                    S::one()
                };
                let store = s.store_mut();
                for (r, &bm) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = m * *r + (S::one() - m) * bm;
                }
                for (r, &bv) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = m * *r + (S::one() - m) * bv * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.store().get(self.running_mean).data().to_vec();
                let var = s.store().get(self.running_var).data().to_vec();
                s.tape.batch_norm_eval(x, g, b, &mean, &var, eps)
            }
        }
    }
}
