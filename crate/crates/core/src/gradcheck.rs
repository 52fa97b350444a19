//! Central finite-difference checks of tape gradients.
//!
//! The numeric derivative uses the fourth-order central stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`; the two-point
//! stencil's `O(h^2)` error is visible through batch norm over few samples.

use rand::seq::index::sample;
use rand::Rng;

use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Probe step is `rel_step * (1 + |x|)`.
    pub rel_step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor: errors are measured relative to
    /// `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Probe at most this many entries of each input (random subset).
    pub max_entries_per_input: Option<usize>,
    /// Minimum distance to a ReLU / max-pool kink at the base point.
    pub min_kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_step: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-3,
            max_entries_per_input: Some(48),
            min_kink_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub entries_checked: usize,
    /// Kink margin observed at the base point.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error <= cfg.tolerance
    }

    /// Whether the base point sits too close to a non-differentiable point
    /// for the finite-difference probe to be meaningful.
    pub fn near_kink(&self, cfg: &GradCheckConfig) -> bool {
        self.kink_margin < cfg.min_kink_margin
    }
}

/// Analytic gradients of a scalar function of several tensors, computed by
/// recording `f` on a fresh tape.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, Vec<Tensor<f64>>, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let g = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    Ok((value, g, tape.kink_margin()))
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Compares tape gradients of `f` against central differences. A base point
/// within `min_kink_margin` of a kink is reported without probing.
pub fn check_gradients<F, R>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let (_, analytic, kink_margin) = analytic_gradients(inputs, &f)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0, kink_margin };
    if report.near_kink(cfg) {
        return Ok(report);
    }
    let mut probe = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let entries: Vec<usize> = match cfg.max_entries_per_input {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for e in entries {
            let x0 = inputs[i].data()[e];
            let h = cfg.rel_step * (1.0 + x0.abs());
            let mut at = |d: f64| {
                probe[i].data_mut()[e] = x0 + d;
                evaluate(&probe, &f)
            };
            let (up, down, up2, down2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe[i].data_mut()[e] = x0;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
            let a = g.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some(Mismatch { input: i, entry: e, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

/// Gradient check of a computation over stored parameters. The probed
/// inputs are `inputs` followed by the current values of `params`; `f`
/// receives a session with `params` bound to the trailing variables and the
/// leading variables for `inputs`. The store is never modified.
pub fn check_session_gradients<F, R>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    mode: Mode,
    f: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|&id| store.get(id).clone()));
    let n = inputs.len();
    check_gradients(
        &all,
        |tape, vars| {
            let mut scratch = store.clone();
            let preset: Vec<(ParamId, Var)> = params.iter().copied().zip(vars[n..].iter().copied()).collect();
            let mut s = Session::on_tape(&mut scratch, mode, std::mem::take(tape), &preset);
            let out = f(&mut s, &vars[..n]);
            *tape = s.into_tape();
            out
        },
        cfg,
        rng,
    )
}
