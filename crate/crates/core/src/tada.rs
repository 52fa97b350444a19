//! Temporally-adaptive convolution.
//!
//! A TAdaConv layer keeps one base kernel `W_b: [Co, Ci, k, k]` shared by all
//! frames and convolves frame `t` with `alpha_t . W_b`, where the calibration
//! `alpha_t` is generated from the clip itself:
//!
//! 1. frame descriptors `v_t` by spatial average pooling (`[N, C, T]`),
//! 2. optionally plus `FC(g)`, `g` the spatio-temporal average (`[N, C]`),
//! 3. a temporal 1D convolution stack (linear: one conv; non-linear:
//!    conv, BN, ReLU, conv with a `C / r` bottleneck),
//! 4. `alpha = 1 + output`.
//!
//! Zero-filling the last generator convolution makes `alpha == 1` for every
//! input, so a freshly initialised layer behaves exactly like the plain
//! convolution with the same base kernel.

use num_rational::Ratio;
use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::nn::{kaiming_uniform, BatchNorm, Conv1d, Layer, Linear};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::{Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorForm {
    /// A single temporal convolution `C -> L` with kernel `k1`.
    Linear,
    /// Temporal conv `C -> C/r` (`k1`), BN, ReLU, temporal conv `C/r -> L` (`k2`).
    NonLinear,
}

/// Which axis of the base kernel the calibration multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CalibrationDim {
    Cin,
    Cout,
    CinXCout,
    /// The `k x k` spatial footprint.
    Kspatial,
}

impl CalibrationDim {
    pub const ALL: [CalibrationDim; 4] =
        [CalibrationDim::Cin, CalibrationDim::Cout, CalibrationDim::CinXCout, CalibrationDim::Kspatial];

    /// Number of calibration entries per frame.
    pub fn len(self, c_in: usize, c_out: usize, k: usize) -> usize {
        match self {
            CalibrationDim::Cin => c_in,
            CalibrationDim::Cout => c_out,
            CalibrationDim::CinXCout => c_out * c_in,
            CalibrationDim::Kspatial => k * k,
        }
    }

    /// Broadcast shape of one frame's calibration against `[Co, Ci, k, k]`.
    fn kernel_shape(self, c_in: usize, c_out: usize, k: usize) -> [usize; 4] {
        match self {
            CalibrationDim::Cin => [1, c_in, 1, 1],
            CalibrationDim::Cout => [c_out, 1, 1, 1],
            CalibrationDim::CinXCout => [c_out, c_in, 1, 1],
            CalibrationDim::Kspatial => [1, 1, k, k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CalibrationSource {
    /// Generated from the input clip.
    Dynamic,
    /// A stored parameter, independent of the input.
    Learnable,
    /// No calibration: `alpha == 1`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CalibrationMode {
    pub source: CalibrationSource,
    /// One calibration per frame (`true`) or one per clip shared by all frames.
    pub temporally_varying: bool,
}

impl CalibrationMode {
    pub const DYNAMIC: CalibrationMode = CalibrationMode { source: CalibrationSource::Dynamic, temporally_varying: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TAdaConvConfig {
    pub generator: GeneratorForm,
    pub k1: usize,
    pub k2: usize,
    pub reduction_ratio: usize,
    pub use_global: bool,
    pub calibration_dim: CalibrationDim,
    pub mode: CalibrationMode,
    /// Proportion of input channels whose kernel rows are calibrated.
    pub calibrated_fraction: Ratio<usize>,
    pub identity_init: bool,
}

impl Default for TAdaConvConfig {
    fn default() -> Self {
        TAdaConvConfig {
            generator: GeneratorForm::NonLinear,
            k1: 3,
            k2: 3,
            reduction_ratio: 4,
            use_global: true,
            calibration_dim: CalibrationDim::Cin,
            mode: CalibrationMode::DYNAMIC,
            calibrated_fraction: Ratio::from_integer(1),
            identity_init: true,
        }
    }
}

impl TAdaConvConfig {
    pub fn validate(&self, c_in: usize) -> Result<()> {
        if self.k1.is_multiple_of(2) || self.k2.is_multiple_of(2) {
            return Err(config_err!("generator kernel sizes must be odd, got ({}, {})", self.k1, self.k2));
        }
        if self.reduction_ratio == 0 {
            return Err(config_err!("reduction ratio must be >= 1"));
        }
        if self.generator == GeneratorForm::NonLinear && c_in / self.reduction_ratio < 1 {
            return Err(config_err!("C / r = {} / {} leaves no hidden channels", c_in, self.reduction_ratio));
        }
        let f = self.calibrated_fraction;
        if *f.numer() == 0 || f > Ratio::from_integer(1) {
            return Err(config_err!("calibrated fraction {} must lie in (0, 1]", f));
        }
        if self.calibrated_channels(c_in) < 1 {
            return Err(config_err!("calibrated fraction {} selects no channel of {}", f, c_in));
        }
        Ok(())
    }

    /// `ceil(fraction * c_in)`: the leading input channels that are calibrated.
    pub fn calibrated_channels(&self, c_in: usize) -> usize {
        (self.calibrated_fraction * Ratio::from_integer(c_in)).ceil().to_integer()
    }

    pub fn hidden_channels(&self, c_in: usize) -> usize {
        c_in / self.reduction_ratio
    }

    /// Temporal reach of the local generator on either side of a frame.
    pub fn receptive_half_width(&self) -> usize {
        match self.generator {
            GeneratorForm::Linear => (self.k1 - 1) / 2,
            GeneratorForm::NonLinear => (self.k1 - 1) / 2 + (self.k2 - 1) / 2,
        }
    }
}

/// Calibration weights `alpha = 1 + generator output`, laid out `[N', L, T']`
/// where `N'` is 1 for learnable calibration and `T'` is 1 when shared over
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationWeights<S> {
    pub alpha: Tensor<S>,
    pub dim: CalibrationDim,
    pub temporally_varying: bool,
}

#[derive(Debug, Clone)]
struct DynamicGenerator {
    global_fc: Option<Linear>,
    first: Conv1d,
    hidden_bn: Option<BatchNorm>,
    last: Option<Conv1d>,
}

#[derive(Debug, Clone)]
enum Generator {
    Dynamic(DynamicGenerator),
    Learnable { alpha: ParamId, frames: usize },
    None,
}

/// A temporally-adaptive 2D convolution layer.
#[derive(Debug, Clone)]
pub struct TAdaConv2d {
    pub cfg: TAdaConvConfig,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Base kernel `[Co, Ci, k, k]`, shared by every frame.
    pub weight: ParamId,
    generator: Generator,
}

impl TAdaConv2d {
    /// `frames` is only consulted by learnable, temporally varying calibration.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        frames: usize,
        cfg: &TAdaConvConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(c_in)?;
        if k.is_multiple_of(2) {
            return Err(config_err!("kernel size {} must be odd", k));
        }
        let weight = store.add_param(format!("{name}.weight"), kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, rng));
        let len = cfg.calibration_dim.len(c_in, c_out, k);
        let generator = match cfg.mode.source {
            CalibrationSource::None => Generator::None,
            CalibrationSource::Learnable => {
                let t = if cfg.mode.temporally_varying { frames } else { 1 };
                if t == 0 {
                    return Err(config_err!("learnable temporally varying calibration needs frames >= 1"));
                }
                let alpha = store.add_param(format!("{name}.alpha"), Tensor::randn(&[1, len, t], 0.1, rng));
                Generator::Learnable { alpha, frames: t }
            }
            CalibrationSource::Dynamic => {
                let global_fc =
                    cfg.use_global.then(|| Linear::new(store, &format!("{name}.gen.global"), c_in, c_in, false, rng));
                let g = match cfg.generator {
                    GeneratorForm::Linear => DynamicGenerator {
                        global_fc,
                        first: Conv1d::new(store, &format!("{name}.gen.a"), c_in, len, cfg.k1, rng),
                        hidden_bn: None,
                        last: None,
                    },
                    GeneratorForm::NonLinear => {
                        let h = cfg.hidden_channels(c_in);
                        DynamicGenerator {
                            global_fc,
                            first: Conv1d::new(store, &format!("{name}.gen.a"), c_in, h, cfg.k1, rng),
                            hidden_bn: Some(BatchNorm::new(store, &format!("{name}.gen.bn"), h)),
                            last: Some(Conv1d::new(store, &format!("{name}.gen.b"), h, len, cfg.k2, rng)),
                        }
                    }
                };
                Generator::Dynamic(g)
            }
        };
        let layer = TAdaConv2d { cfg: cfg.clone(), c_in, c_out, k, stride, pad, weight, generator };
        if cfg.identity_init {
            layer.init_identity(store, rng);
        }
        Ok(layer)
    }

    /// Calibration entries per frame.
    pub fn calibration_len(&self) -> usize {
        self.cfg.calibration_dim.len(self.c_in, self.c_out, self.k)
    }

    /// Zero the last generator layer (or the learnable calibration) and
    /// re-draw the first generator layer, so that `alpha == 1` exactly.
    pub fn init_identity<S: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        match &self.generator {
            Generator::None => {}
            Generator::Learnable { alpha, .. } => {
                let shape = store.get(*alpha).shape().to_vec();
                *store.get_mut(*alpha) = Tensor::zeros(&shape);
            }
            Generator::Dynamic(g) => {
                let last = g.last.as_ref().unwrap_or(&g.first);
                if g.last.is_some() {
                    let shape = store.get(g.first.weight).shape().to_vec();
                    *store.get_mut(g.first.weight) = kaiming_uniform(&shape, g.first.c_in * g.first.k, rng);
                }
                let shape = store.get(last.weight).shape().to_vec();
                *store.get_mut(last.weight) = Tensor::zeros(&shape);
            }
        }
    }

    /// Parameter of the last generator layer, the one zeroed by identity init.
    pub fn last_generator_param(&self) -> Option<ParamId> {
        match &self.generator {
            Generator::None => None,
            Generator::Learnable { alpha, .. } => Some(*alpha),
            Generator::Dynamic(g) => Some(g.last.as_ref().unwrap_or(&g.first).weight),
        }
    }

    /// Generator output before the `+ 1`, shaped `[N', L, T']`. `None` when
    /// calibration is disabled.
    fn calibration_core<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Option<Var>> {
        let [n, c, t, _, _] = s.value(x).video_dims()?;
        if c != self.c_in {
            return Err(dim_err!("TAdaConv expects {} input channels, got {}", self.c_in, c));
        }
        match &self.generator {
            Generator::None => Ok(None),
            Generator::Learnable { alpha, frames } => {
                if self.cfg.mode.temporally_varying && *frames != t {
                    return Err(dim_err!("learnable calibration holds {} frames, input has {}", frames, t));
                }
                Ok(Some(s.param(*alpha)))
            }
            Generator::Dynamic(g) => {
                let varying = self.cfg.mode.temporally_varying;
                let mut v = if varying {
                    s.tape.gap_spatial(x)?
                } else {
                    let gv = s.tape.gap_spatiotemporal(x)?;
                    s.tape.reshape(gv, &[n, c, 1])?
                };
                if let Some(fc) = &g.global_fc {
                    let gv = s.tape.gap_spatiotemporal(x)?;
                    let fg = fc.forward(s, gv)?;
                    let fg = s.tape.reshape(fg, &[n, c, 1])?;
                    let fg = if varying { s.tape.expand(fg, &[n, c, t])? } else { fg };
                    v = s.tape.add(v, fg)?;
                }
                let mut h = g.first.forward(s, v)?;
                if let (Some(bn), Some(last)) = (&g.hidden_bn, &g.last) {
                    h = bn.forward(s, h)?;
                    h = s.tape.relu(h);
                    h = last.forward(s, h)?;
                }
                Ok(Some(h))
            }
        }
    }

    /// Records the calibration weights `alpha` (`[N', L, T']`) on the session tape.
    pub fn calibration<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        match self.calibration_core(s, x)? {
            Some(core) => Ok(s.tape.add_scalar(core, S::one())),
            None => {
                let [n, ..] = s.value(x).video_dims()?;
                Ok(s.tape.constant(Tensor::ones(&[n, self.calibration_len(), 1])))
            }
        }
    }

    /// Forward-only calibration weights for `x`.
    pub fn generate_calibration<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<CalibrationWeights<S>> {
        let mut s = Session::inference(store, mode);
        let xv = s.input(x.clone());
        let a = self.calibration(&mut s, xv)?;
        let varying = match self.cfg.mode.source {
            CalibrationSource::None => false,
            _ => self.cfg.mode.temporally_varying,
        };
        Ok(CalibrationWeights { alpha: s.value(a).clone(), dim: self.cfg.calibration_dim, temporally_varying: varying })
    }

    /// Per-frame kernels `W[n, t] = alpha[n, t] . W_b` as `[N, T, Co, Ci, k, k]`.
    /// Only the first `ceil(fraction * Ci)` input-channel rows are calibrated.
    pub fn frame_kernels<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Option<Var>> {
        let [n, _, t, _, _] = s.value(x).video_dims()?;
        let Some(core) = self.calibration_core(s, x)? else { return Ok(None) };
        let (ci, co, k) = (self.c_in, self.c_out, self.k);
        let [na, _, ta] = match *s.value(core).shape() {
            [a, b, c] => [a, b, c],
            ref sh => return Err(dim_err!("calibration has unexpected shape {:?}", sh)),
        };
        let ks = self.cfg.calibration_dim.kernel_shape(ci, co, k);
        let core = s.tape.permute(core, &[0, 2, 1])?;
        let mut core = s.tape.reshape(core, &[na, ta, ks[0], ks[1], ks[2], ks[3]])?;
        let m = self.cfg.calibrated_channels(ci);
        if m < ci {
            let mask_shape = [1, 1, 1, ci, 1, 1];
            let mask = Tensor::from_fn(&mask_shape, |i| if i[3] < m { S::one() } else { S::zero() });
            let mask = s.tape.constant(mask);
            let full = [na, ta, ks[0], ci, ks[2], ks[3]];
            let core_b = s.tape.expand(core, &full)?;
            let mask_b = s.tape.expand(mask, &full)?;
            core = s.tape.mul(core_b, mask_b)?;
        }
        let factor = s.tape.add_scalar(core, S::one());
        let full = [n, t, co, ci, k, k];
        let factor = s.tape.expand(factor, &full)?;
        let wb = s.param(self.weight);
        let wb = s.tape.reshape(wb, &[1, 1, co, ci, k, k])?;
        let wb = s.tape.expand(wb, &full)?;
        Ok(Some(s.tape.mul(factor, wb)?))
    }
}

impl<S: Scalar> Layer<S> for TAdaConv2d {
    /// Frame `t` convolved with its calibrated kernel `alpha_t . W_b`.
    fn forward(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        match self.frame_kernels(s, x)? {
            Some(w) => s.tape.conv2d_frame_kernels(x, w, self.stride, self.pad),
            None => {
                let wb = s.param(self.weight);
                s.tape.conv2d(x, wb, self.stride, self.pad)
            }
        }
    }
}

/// Forward-only convenience around [`Layer::forward`].
pub fn tadaconv_forward<S: Scalar>(
    layer: &TAdaConv2d,
    store: &mut ParamStore<S>,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let mut s = Session::inference(store, mode);
    let xv = s.input(x.clone());
    let y = layer.forward(&mut s, xv)?;
    Ok(s.value(y).clone())
}
