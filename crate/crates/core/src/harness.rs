//! Seeded verification suites, cost reports and the synthetic
//! temporal-order task.
//!
//! Every suite case draws from its own ChaCha stream `(seed, case)`, so
//! results do not depend on how cases are spread over worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline::{grouped_calibrated_form, masked_calibrated_form, r2plus1d_forward, TemporalKernel};
use crate::blocks::{
    build_network, AggregationParams, AggregationSpec, BlockSpec, BlockVariantFlags, Bottleneck, ConvKind, NetSpec,
    PoolKind,
};
use crate::cost::{net_cost, op_cost, Convention, CostDelta, CostReport, CostRow, OpCostQuery};
use crate::error::{config_err, Result};
use crate::gradcheck::{check_gradients, check_session_gradients, GradCheckConfig, GradCheckReport};
use crate::nn::Layer;
use crate::params::{Mode, ParamStore, Session, Sgd};
use crate::tada::{
    tadaconv_forward, CalibrationDim, CalibrationMode, CalibrationSource, CalibrationWeights, GeneratorForm,
    TAdaConv2d, TAdaConvConfig,
};
use crate::{ops, reference, Error, Scalar, Tape, Tensor, Var};

/// Outcome of one verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest per-case metric.
    pub worst: f64,
    pub tolerance: f64,
    /// What `worst` measures.
    pub metric: &'static str,
    pub wall: Duration,
    /// One line per failing case.
    pub details: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ({} cases, {} failures, worst {} {:.3e}, tolerance {:.1e}, {:.2}s)",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases,
            self.failures,
            self.metric,
            self.worst,
            self.tolerance,
            self.wall.as_secs_f64()
        )?;
        for d in &self.details {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

/// Independent random stream for case `case` of a suite seeded with `seed`.
pub fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    rng
}

fn run_suite<F>(name: &str, metric: &'static str, tolerance: f64, seed: u64, cases: usize, case: F) -> Result<SuiteResult>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, String)> + Sync,
{
    if cases == 0 {
        return Err(Error::Usage(format!("{name}: cases must be >= 1")));
    }
    let start = Instant::now();
    let outcomes = (0..cases)
        .into_par_iter()
        .map(|i| case(&mut case_rng(seed, i)).map(|(m, what)| (i, m, what)))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for (i, m, what) in outcomes {
        let m = if m.is_nan() { f64::INFINITY } else { m };
        worst = worst.max(m);
        if m > tolerance {
            details.push(format!("case {i}: {metric} {m:.3e} ({what})"));
        }
    }
    Ok(SuiteResult {
        name: name.to_string(),
        cases,
        failures: details.len(),
        worst,
        tolerance,
        metric,
        wall: start.elapsed(),
        details,
    })
}

/// A random but valid calibration setup for `c_in` input channels.
pub fn random_tada_config<R: Rng + ?Sized>(rng: &mut R, c_in: usize, identity_init: bool) -> TAdaConvConfig {
    let odd = [1, 3, 5];
    let source = match rng.gen_range(0..5) {
        0 => CalibrationSource::Learnable,
        1 => CalibrationSource::None,
        _ => CalibrationSource::Dynamic,
    };
    let den = rng.gen_range(1..=4);
    TAdaConvConfig {
        generator: if rng.gen() { GeneratorForm::Linear } else { GeneratorForm::NonLinear },
        k1: *odd.choose(rng).unwrap(),
        k2: *odd.choose(rng).unwrap(),
        reduction_ratio: rng.gen_range(1..=c_in),
        use_global: rng.gen(),
        calibration_dim: *CalibrationDim::ALL.choose(rng).unwrap(),
        mode: CalibrationMode { source, temporally_varying: rng.gen() },
        calibrated_fraction: Ratio::new(rng.gen_range(1..=den), den),
        identity_init,
    }
}

/// Per-frame kernels `[N, T, Co, Ci, k, k]` built entry by entry from the
/// base kernel and calibration weights.
pub fn materialize_kernels<S: Scalar>(
    base: &Tensor<S>,
    cal: &CalibrationWeights<S>,
    calibrated_channels: usize,
    n: usize,
    t: usize,
) -> Result<Tensor<S>> {
    let (co, ci, k) = match *base.shape() {
        [co, ci, k, _] => (co, ci, k),
        ref s => return Err(Error::Dimension(format!("base kernel must be [Co, Ci, k, k], got {s:?}"))),
    };
    let [na, _, ta] = match *cal.alpha.shape() {
        [a, b, c] => [a, b, c],
        ref s => return Err(Error::Dimension(format!("calibration must be [N, L, T], got {s:?}"))),
    };
    let mut out = Tensor::zeros(&[n, t, co, ci, k, k]);
    for nn in 0..n {
        for tt in 0..t {
            let (an, at) = (if na == 1 { 0 } else { nn }, if ta == 1 { 0 } else { tt });
            for o in 0..co {
                for i in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let l = match cal.dim {
                                CalibrationDim::Cin => i,
                                CalibrationDim::Cout => o,
                                CalibrationDim::CinXCout => o * ci + i,
                                CalibrationDim::Kspatial => a * k + b,
                            };
                            let alpha = if i < calibrated_channels { cal.alpha.at(&[an, l, at])? } else { S::one() };
                            out.set(&[nn, tt, o, i, a, b], alpha * base.at(&[o, i, a, b])?)?;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn equivalence_case<S: Scalar>(rng: &mut ChaCha8Rng, fault_injection: bool) -> Result<(f64, String)> {
    let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (t, h, w) = (rng.gen_range(2..=6), rng.gen_range(3..=6), rng.gen_range(3..=6));
    let k = *[1, 3].choose(rng).unwrap();
    let stride = rng.gen_range(1..=2);
    let taps = *[1, 3, 5].choose(rng).unwrap();
    let x = Tensor::<S>::randn(&[n, ci, t, h, w], 1.0, rng);
    let ws = Tensor::<S>::randn(&[co, ci, k, k], 1.0, rng);
    let beta = TemporalKernel::new(Tensor::<S>::randn(&[co, taps], 1.0, rng))?;
    let rhs_beta = if fault_injection {
        let mut b = beta.beta().clone();
        b.data_mut()[0] += S::from_f64_lossy(0.5);
        TemporalKernel::new(b)?
    } else {
        beta.clone()
    };
    let pad = (k - 1) / 2;
    let grouped = r2plus1d_forward(&x, &ws, &beta, stride, pad, false)?
        .max_abs_diff(&grouped_calibrated_form(&x, &ws, &rhs_beta, stride, pad)?)?;
    let masked = r2plus1d_forward(&x, &ws, &beta, stride, pad, true)?
        .max_abs_diff(&masked_calibrated_form(&x, &ws, &rhs_beta, stride, pad)?.0)?;

    let c_in = rng.gen_range(2..=5);
    let cfg = random_tada_config(rng, c_in, true);
    let mut store = ParamStore::<S>::new();
    let layer = TAdaConv2d::new(&mut store, "tada", c_in, co, k, stride, pad, t, &cfg, rng)?;
    let xt = Tensor::<S>::randn(&[n, c_in, t, h, w], 1.0, rng);
    let identity = tadaconv_forward(&layer, &mut store, &xt, Mode::Train)?
        .max_abs_diff(&ops::conv2d_per_frame(&xt, store.get(layer.weight), stride, pad)?)?;

    let cfg = TAdaConvConfig { identity_init: false, ..cfg };
    let mut store = ParamStore::<S>::new();
    let layer = TAdaConv2d::new(&mut store, "tada", c_in, co, k, stride, pad, t, &cfg, rng)?;
    let cal = layer.generate_calibration(&mut store, &xt, Mode::Train)?;
    let kernels = materialize_kernels(store.get(layer.weight), &cal, cfg.calibrated_channels(c_in), n, t)?;
    let materialized = tadaconv_forward(&layer, &mut store, &xt, Mode::Train)?
        .max_abs_diff(&reference::conv2d_frame_kernels(&xt, &kernels, stride, pad)?)?;

    let parts = [grouped, masked, identity, materialized].map(|d| d.as_f64());
    let worst = parts.iter().copied().fold(0.0, f64::max);
    let what = format!(
        "grouped {:.1e}, masked {:.1e}, identity {:.1e}, materialized {:.1e}; {:?}/{:?}",
        parts[0], parts[1], parts[2], parts[3], cfg.calibration_dim, cfg.mode.source
    );
    Ok((worst, what))
}

/// Randomised oracle comparisons: temporal convolution against its
/// calibrated-kernel rewrites (with and without activation), identity
/// initialisation against the plain convolution, and the calibrated
/// convolution against explicitly materialised per-frame kernels.
/// `fault_injection` perturbs the temporal kernel on one side only.
pub fn cmd_equivalence<S: Scalar>(seed: u64, cases: usize, fault_injection: bool) -> Result<SuiteResult> {
    run_suite("equivalence", "max abs diff", S::ORACLE_TOL, seed, cases, |rng| {
        equivalence_case::<S>(rng, fault_injection)
    })
}

/// Resampling attempts when a draw sits near a ReLU or max-pool kink.
pub const MAX_RESAMPLES: usize = 200;

fn resampled<F>(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, mut attempt: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>,
{
    let mut last = attempt(rng)?;
    for _ in 1..MAX_RESAMPLES {
        if !last.near_kink(cfg) {
            break;
        }
        last = attempt(rng)?;
    }
    Ok(last)
}

fn out_shape<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<usize>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    Ok(tape.shape(y).to_vec())
}

/// A random direction of unit Frobenius norm, so projected losses stay O(1)
/// whatever the output size.
fn unit_direction(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let p = Tensor::randn(shape, 1.0, rng);
    let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    p.scale(1.0 / norm.max(f64::MIN_POSITIVE))
}

fn project(t: &mut Tape<f64>, y: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = t.constant(proj.clone());
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

/// Gradient check of `sum(f(inputs) * P)` for a random unit direction `P`.
pub fn check_projected<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let proj = unit_direction(&out_shape(inputs, &f)?, rng);
    check_gradients(
        inputs,
        |t, v| {
            let y = f(t, v)?;
            project(t, y, &proj)
        },
        cfg,
        rng,
    )
}

fn check_layer<L: Layer<f64>>(
    store: &mut ParamStore<f64>,
    layer: &L,
    x: &Tensor<f64>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let params = store.trainable_ids();
    let shape = {
        let mut s = Session::inference(store, Mode::Train);
        let xv = s.input(x.clone());
        let y = layer.forward(&mut s, xv)?;
        s.tape.shape(y).to_vec()
    };
    let proj = unit_direction(&shape, rng);
    check_session_gradients(
        store,
        &params,
        std::slice::from_ref(x),
        Mode::Train,
        |s, v| {
            let y = layer.forward(s, v[0])?;
            project(&mut s.tape, y, &proj)
        },
        cfg,
        rng,
    )
}

fn randomize_batch_norms<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R) {
    for id in store.trainable_ids() {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        if name.ends_with(".gamma") {
            *store.get_mut(id) = Tensor::rand_uniform(&shape, 0.5, 1.5, rng);
        } else if name.ends_with(".beta") {
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, rng);
        }
    }
}

fn random_aggregation<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> AggregationSpec {
    let flags = *BlockVariantFlags::all().choose(rng).unwrap();
    let pool = *[PoolKind::Avg, PoolKind::Max, PoolKind::Mix].choose(rng).unwrap();
    let k = *[1, 3].iter().filter(|&&k| k <= frames).collect::<Vec<_>>().choose(rng).unwrap();
    AggregationSpec { flags, pool, k: *k }
}

type Probe = fn(&mut ChaCha8Rng, &GradCheckConfig) -> Result<GradCheckReport>;

fn video(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4))
}

/// Primitive-level gradient probes.
const OP_ZOO: &[(&str, Probe)] = &[
    ("conv2d", |rng, cfg| {
        let (n, c, t, h, w) = video(rng);
        let (co, k, stride) = (rng.gen_range(1..=3), *[1, 3].choose(rng).unwrap(), rng.gen_range(1..=2));
        let pad = rng.gen_range(0..=(k - 1) / 2);
        let inputs = [Tensor::randn(&[n, c, t, h + 1, w + 1], 1.0, rng), Tensor::randn(&[co, c, k, k], 1.0, rng)];
        check_projected(&inputs, |tp, v| tp.conv2d(v[0], v[1], stride, pad), cfg, rng)
    }),
    ("conv2d_frame_kernels", |rng, cfg| {
        let (n, c, t, h, w) = video(rng);
        let (co, k) = (rng.gen_range(1..=3), *[1, 3].choose(rng).unwrap());
        let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng), Tensor::randn(&[n, t, co, c, k, k], 1.0, rng)];
        check_projected(&inputs, |tp, v| tp.conv2d_frame_kernels(v[0], v[1], 1, (k - 1) / 2), cfg, rng)
    }),
    ("conv1d", |rng, cfg| {
        let (n, c, t) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(2..=6));
        let (co, k) = (rng.gen_range(1..=3), *[1, 3, 5].choose(rng).unwrap());
        let inputs = [Tensor::randn(&[n, c, t], 1.0, rng), Tensor::randn(&[co, c, k], 1.0, rng)];
        check_projected(&inputs, |tp, v| tp.conv1d(v[0], v[1], 1, (k - 1) / 2), cfg, rng)
    }),
    ("conv3d", |rng, cfg| {
        let (n, c, t, h, w) = video(rng);
        let co = rng.gen_range(1..=2);
        let kernel = [*[1, 3].choose(rng).unwrap(), *[1, 3].choose(rng).unwrap(), 1];
        let inputs = [Tensor::randn(&[n, c, t + 1, h, w], 1.0, rng), Tensor::randn(&[co, c, kernel[0], kernel[1], kernel[2]], 1.0, rng)];
        let pad = [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, 0];
        check_projected(&inputs, |tp, v| tp.conv3d(v[0], v[1], [1, 1, 1], pad), cfg, rng)
    }),
    ("depthwise_temporal", |rng, cfg| {
        let (n, c, t, h, w) = video(rng);
        let kt = *[1, 3].choose(rng).unwrap();
        let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng), Tensor::randn(&[c, kt], 1.0, rng)];
        check_projected(&inputs, |tp, v| tp.depthwise_temporal(v[0], v[1]), cfg, rng)
    }),
    ("gap", |rng, cfg| {
        let (n, c, t, h, w) = video(rng);
        let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng)];
        check_projected(
            &inputs,
            |tp, v| {
                let a = tp.gap_spatial(v[0])?;
                let g = tp.gap_spatiotemporal(v[0])?;
                let g = tp.reshape(g, &[n, c, 1])?;
                let g = tp.expand(g, &[n, c, t])?;
                tp.mul(a, g)
            },
            cfg,
            rng,
        )
    }),
    ("batch_norm_train", |rng, cfg| {
        let (_, c, t, h, w) = video(rng);
        let inputs = [
            Tensor::randn(&[2, c, t, h, w], 1.0, rng),
            Tensor::rand_uniform(&[c], 0.5, 1.5, rng),
            Tensor::randn(&[c], 1.0, rng),
        ];
        check_projected(&inputs, |tp, v| Ok(tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), cfg, rng)
    }),
    ("temporal_pools", |rng, cfg| {
        resampled(rng, cfg, |rng| {
            let (n, c, t, h, w) = video(rng);
            let k = rng.gen_range(1..=t);
            let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng)];
            check_projected(
                &inputs,
                |tp, v| {
                    let a = tp.temporal_avg_pool(v[0], k)?;
                    let m = tp.temporal_max_pool(v[0], k)?;
                    tp.mul(a, m)
                },
                cfg,
                rng,
            )
        })
    }),
    ("temporal_shift", |rng, cfg| {
        let (n, _, t, h, w) = video(rng);
        let c = rng.gen_range(2..=6);
        let (nf, nb) = (rng.gen_range(0..=c / 2), rng.gen_range(0..=c / 2));
        let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng)];
        check_projected(&inputs, |tp, v| tp.temporal_shift(v[0], nf, nb), cfg, rng)
    }),
    ("elementwise_relu", |rng, cfg| {
        resampled(rng, cfg, |rng| {
            let (n, c, t, h, w) = video(rng);
            let inputs = [Tensor::randn(&[n, c, t, h, w], 1.0, rng), Tensor::randn(&[1, c, 1, 1, 1], 1.0, rng)];
            check_projected(
                &inputs,
                |tp, v| {
                    let b = tp.expand(v[1], &[n, c, t, h, w])?;
                    let p = tp.mul(v[0], b)?;
                    let p = tp.permute(p, &[0, 2, 1, 3, 4])?;
                    let p = tp.pad_axis(p, 1, 1, 0)?;
                    let p = tp.add_scalar(p, 0.25);
                    let r = tp.relu(p);
                    let d = tp.sub(r, p)?;
                    Ok(tp.scale(d, 1.5))
                },
                cfg,
                rng,
            )
        })
    }),
    ("linear_softmax_ce", |rng, cfg| {
        let (n, ci, co) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(2..=4));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..co)).collect();
        let inputs = [Tensor::randn(&[n, ci], 1.0, rng), Tensor::randn(&[co, ci], 1.0, rng), Tensor::randn(&[co], 1.0, rng)];
        check_gradients(
            &inputs,
            |tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                tp.softmax_cross_entropy(y, &labels)
            },
            cfg,
            rng,
        )
    }),
];

/// Calibrated convolution with every parameter probed, generator included.
fn probe_tadaconv(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    resampled(rng, cfg, |rng| {
        let (c_in, co, t) = (rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(2..=4));
        let mut tc = random_tada_config(rng, c_in, false);
        if tc.mode.source == CalibrationSource::None {
            tc.mode.source = CalibrationSource::Dynamic;
        }
        let k = *[1, 3].choose(rng).unwrap();
        let mut store = ParamStore::new();
        let layer = TAdaConv2d::new(&mut store, "tada", c_in, co, k, 1, (k - 1) / 2, t, &tc, rng)?;
        randomize_batch_norms(&mut store, rng);
        let x = Tensor::randn(&[2, c_in, t, 4, 4], 1.0, rng);
        check_layer(&mut store, &layer, &x, cfg, rng)
    })
}

fn probe_aggregation(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    resampled(rng, cfg, |rng| {
        let (c, t) = (rng.gen_range(1..=3), rng.gen_range(2..=5));
        let spec = random_aggregation(rng, t);
        let mut store = ParamStore::new();
        let agg = AggregationParams::new(&mut store, "agg", c, &spec)?;
        randomize_batch_norms(&mut store, rng);
        let x = Tensor::randn(&[2, c, t, 3, 3], 1.0, rng);
        check_layer(&mut store, &agg, &x, cfg, rng)
    })
}

fn probe_tada_block(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    resampled(rng, cfg, |rng| {
        let mid = rng.gen_range(2..=3);
        let mut tada = random_tada_config(rng, mid, false);
        tada.mode.source = CalibrationSource::Dynamic;
        let spec = BlockSpec {
            c_in: rng.gen_range(2..=4),
            mid,
            c_out: rng.gen_range(2..=4),
            stride: rng.gen_range(1..=2),
            conv_kind: ConvKind::Tada,
            tada,
            aggregation: random_aggregation(rng, 4),
        };
        let mut store = ParamStore::new();
        let block = Bottleneck::new(&mut store, "block", &spec, 4, rng)?;
        randomize_batch_norms(&mut store, rng);
        let x = Tensor::randn(&[1, spec.c_in, 4, 8, 8], 1.0, rng);
        check_layer(&mut store, &block, &x, cfg, rng)
    })
}

fn gradcheck_case(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<(f64, String)> {
    let mut probes: Vec<(&str, Probe)> = OP_ZOO.to_vec();
    probes.push(("tadaconv", probe_tadaconv));
    probes.push(("aggregation", probe_aggregation));
    probes.push(("tada_block", probe_tada_block));
    let mut worst = (0.0f64, "none");
    for (name, probe) in probes {
        let r = probe(rng, cfg)?;
        if r.near_kink(cfg) {
            return Err(Error::Divergence(format!("{name}: every resample landed within {} of a kink", cfg.min_kink_margin)));
        }
        let e = r.max_rel_error;
        if e > worst.0 || e.is_nan() {
            worst = (e, name);
        }
    }
    Ok((worst.0, format!("worst probe {}", worst.1)))
}

/// Central finite differences against tape gradients across the primitive
/// zoo, the calibrated convolution, the aggregation and a full calibrated
/// bottleneck block (f64).
pub fn cmd_gradcheck(seed: u64, cases: usize) -> Result<SuiteResult> {
    let cfg = GradCheckConfig::default();
    run_suite("gradcheck", "max rel error", cfg.tolerance, seed, cases, |rng| gradcheck_case(rng, &cfg))
}

/// Plain `key = value` lines; `#` starts a comment. A `seed` entry is required.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyValueConfig {
    entries: BTreeMap<String, String>,
}

impl KeyValueConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        let cfg = KeyValueConfig { entries };
        cfg.seed()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")?.ok_or_else(|| Error::Usage("config file must set `seed`".into()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Usage(format!("config key {key:?}: cannot parse {v:?}"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Usage(format!("unknown config key {k:?}; expected one of {}", known.join(", ")))),
            None => Ok(()),
        }
    }
}

fn parse_ratio(s: &str) -> Result<Ratio<usize>> {
    let bad = || Error::Usage(format!("cannot parse fraction {s:?}"));
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b == 0 {
                return Err(bad());
            }
            Ok(Ratio::new(a, b))
        }
        None => Ok(Ratio::from_integer(s.trim().parse().map_err(|_| bad())?)),
    }
}

/// A network described by a config file: a `preset` plus overrides.
pub fn netspec_from_config(cfg: &KeyValueConfig) -> Result<NetSpec> {
    cfg.reject_unknown(&[
        "seed",
        "preset",
        "name",
        "frames",
        "size",
        "tada_stages",
        "calibrated_fraction",
        "reduction_ratio",
        "use_global",
    ])?;
    let preset: String = cfg.get("preset")?.ok_or_else(|| Error::Usage("config file must set `preset`".into()))?;
    let mut spec = NetSpec::preset(&preset)?;
    if let Some(name) = cfg.get::<String>("name")? {
        spec.name = name;
    }
    if let Some(t) = cfg.get("frames")? {
        spec.input[0] = t;
    }
    if let Some(s) = cfg.get("size")? {
        spec.input[1] = s;
        spec.input[2] = s;
    }
    if let Some(stages) = cfg.get::<String>("tada_stages")? {
        let on = stages
            .split(',')
            .map(|v| match v.trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                o => Err(Error::Usage(format!("tada_stages entry {o:?} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if on.len() != spec.stages.len() {
            return Err(config_err!("tada_stages lists {} stages, network has {}", on.len(), spec.stages.len()));
        }
        spec = spec.with_stage_kinds(&on, ConvKind::Tada);
    }
    if let Some(f) = cfg.get::<String>("calibrated_fraction")? {
        spec.tada.calibrated_fraction = parse_ratio(&f)?;
    }
    if let Some(r) = cfg.get("reduction_ratio")? {
        spec.tada.reduction_ratio = r;
    }
    if let Some(g) = cfg.get("use_global")? {
        spec.tada.use_global = g;
    }
    Ok(spec)
}

/// A preset name, or the path of a config file describing a network.
pub fn resolve_netspec(target: &str) -> Result<NetSpec> {
    let path = Path::new(target);
    if path.is_file() {
        return netspec_from_config(&KeyValueConfig::load(path)?);
    }
    NetSpec::preset(target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostOutcome {
    pub report: CostReport,
    pub delta: Option<CostDelta>,
}

/// Network cost report, optionally with deltas against `compare`.
pub fn cmd_cost(target: &str, convention: Convention, compare: Option<&str>) -> Result<CostOutcome> {
    let report = net_cost(&resolve_netspec(target)?, convention)?;
    let delta = match compare {
        Some(b) => Some(report.delta(&net_cost(&resolve_netspec(b)?, convention)?)),
        None => None,
    };
    Ok(CostOutcome { report, delta })
}

/// Single-operator report in the same layout as network reports.
pub fn op_cost_report(q: &OpCostQuery) -> Result<CostReport> {
    let c = op_cost(q)?;
    Ok(CostReport {
        name: format!("op {}", q.kind.name()),
        convention: q.convention,
        rows: vec![CostRow {
            layer: "op".into(),
            kind: q.kind.name().into(),
            ci: q.ci,
            co: q.co,
            t: q.t,
            h: q.h,
            w: q.w,
            flops: c.flops,
            params: c.params,
        }],
    })
}

/// Brightness-ramp clips whose class is the direction of the ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec { frames: 8, size: 8, channels: 1, noise: 0.1, train_per_class: 128, test_per_class: 200, seed: 0 }
    }
}

/// Class 0: brightness rises over time. Class 1: it falls.
pub const ASCENDING: usize = 0;
pub const DESCENDING: usize = 1;

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    /// `[N, C, T, H, W]`.
    pub clips: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every clip reversed in time, with labels flipped.
    pub fn time_reversed(&self) -> Result<Dataset<S>> {
        Ok(Dataset { clips: self.clips.flip(2)?, labels: self.labels.iter().map(|&l| 1 - l).collect() })
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let per: usize = self.clips.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.clips.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.clips.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(&shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.size == 0 || self.channels == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(config_err!("synthetic task needs frames >= 2 and positive sizes and counts"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise must be finite and non-negative"));
        }
        Ok(())
    }

    /// One ascending clip `[C, T, H, W]`: a random offset, a positive slope,
    /// a fixed random texture and per-pixel noise.
    fn ascending_clip<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        let (c, t, hw) = (self.channels, self.frames, self.size * self.size);
        let offset = rng.gen_range(-1.0..0.0);
        let slope = rng.gen_range(0.5..1.5);
        let texture = Tensor::<f64>::randn(&[c, hw], 0.3, rng);
        let noise = Tensor::<f64>::randn(&[c, t, hw], self.noise, rng);
        let mut out = Vec::with_capacity(c * t * hw);
        for cc in 0..c {
            for tt in 0..t {
                let level = offset + slope * tt as f64 / (t - 1) as f64;
                for p in 0..hw {
                    out.push(S::from_f64_lossy(level + texture.data()[cc * hw + p] + noise.data()[(cc * t + tt) * hw + p]));
                }
            }
        }
        out
    }

    /// `per_class` ascending clips, each paired with its time reversal as a
    /// descending clip. The pairing makes any time-order-blind model score
    /// exactly one of each pair.
    pub fn mirrored_pairs<S: Scalar, R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<Dataset<S>> {
        let (c, t, s) = (self.channels, self.frames, self.size);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            let clip = Tensor::new(&[1, c, t, s, s], self.ascending_clip::<S, R>(rng))?;
            data.extend_from_slice(clip.data());
            data.extend_from_slice(clip.flip(2)?.data());
            labels.extend([ASCENDING, DESCENDING]);
        }
        Ok(Dataset { clips: Tensor::new(&[2 * per_class, c, t, s, s], data)?, labels })
    }

    /// Training and test sets drawn from independent streams of `seed`.
    pub fn generate<S: Scalar>(&self) -> Result<(Dataset<S>, Dataset<S>)> {
        self.validate()?;
        let train = self.mirrored_pairs(self.train_per_class, &mut case_rng(self.seed, 0))?;
        let test = self.mirrored_pairs(self.test_per_class, &mut case_rng(self.seed, 1))?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DemoModel {
    /// Shared-weight spatial convolutions.
    Static,
    /// Default calibrated convolutions.
    Tada,
    /// Calibrated convolutions that only see their own frame.
    TadaNoContext,
}

impl DemoModel {
    pub const ALL: [DemoModel; 3] = [DemoModel::Static, DemoModel::Tada, DemoModel::TadaNoContext];

    pub fn name(self) -> &'static str {
        match self {
            DemoModel::Static => "static",
            DemoModel::Tada => "tada",
            DemoModel::TadaNoContext => "tada_no_context",
        }
    }

    /// The two-stage network trained on `task`.
    pub fn netspec(self, task: &SyntheticTaskSpec, width: usize) -> NetSpec {
        let kind = if self == DemoModel::Static { ConvKind::Spatial } else { ConvKind::Tada };
        let mut spec =
            NetSpec::toy(&format!("demo-{}", self.name()), task.channels, [task.frames, task.size, task.size], width, 2, kind);
        if self == DemoModel::TadaNoContext {
            spec.tada = TAdaConvConfig { k1: 1, k2: 1, use_global: false, ..TAdaConvConfig::default() };
        }
        spec
    }
}

impl FromStr for DemoModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DemoModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown demo model {s:?}; expected static, tada or tada_no_context")))
    }
}

/// Optimisation settings of the demo.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub width: usize,
    /// Training stops early after an epoch whose training accuracy reaches
    /// this. Without it every run lasts `max_epochs`.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_epochs: 20, batch: 16, lr: 0.05, momentum: 0.9, width: 16, target_train_accuracy: None }
    }
}

/// Task and optimiser settings read from a config file; unset keys keep
/// their defaults.
pub fn demo_settings_from_config(cfg: &KeyValueConfig) -> Result<(SyntheticTaskSpec, TrainConfig)> {
    cfg.reject_unknown(&[
        "seed",
        "frames",
        "size",
        "channels",
        "noise",
        "train_per_class",
        "test_per_class",
        "max_epochs",
        "batch",
        "lr",
        "momentum",
        "width",
        "target_train_accuracy",
    ])?;
    let mut task = SyntheticTaskSpec { seed: cfg.seed()?, ..Default::default() };
    let mut train = TrainConfig::default();
    macro_rules! set {
        ($dst:expr, $key:literal) => {
            if let Some(v) = cfg.get($key)? {
                $dst = v;
            }
        };
    }
    set!(task.frames, "frames");
    set!(task.size, "size");
    set!(task.channels, "channels");
    set!(task.noise, "noise");
    set!(task.train_per_class, "train_per_class");
    set!(task.test_per_class, "test_per_class");
    set!(train.max_epochs, "max_epochs");
    set!(train.batch, "batch");
    set!(train.lr, "lr");
    set!(train.momentum, "momentum");
    set!(train.width, "width");
    if let Some(v) = cfg.get("target_train_accuracy")? {
        train.target_train_accuracy = Some(v);
    }
    task.validate()?;
    if train.max_epochs == 0 || train.batch == 0 || train.width < 2 {
        return Err(config_err!("max_epochs and batch must be positive and width at least 2"));
    }
    Ok((task, train))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoResult {
    pub model: DemoModel,
    pub curve: Vec<EpochRecord>,
    pub test_accuracy: f64,
    /// Accuracy on the time-reversed test set with flipped labels.
    pub reversed_accuracy: f64,
    pub wall: Duration,
}

/// Test-accuracy bound a demo model is expected to meet: at least `min`
/// for adaptive models, at most `max` for order-blind ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccuracyExpectation {
    AtLeast(f64),
    AtMost(f64),
}

impl AccuracyExpectation {
    pub fn holds(self, accuracy: f64) -> bool {
        match self {
            AccuracyExpectation::AtLeast(b) => accuracy >= b,
            AccuracyExpectation::AtMost(b) => accuracy <= b,
        }
    }
}

impl fmt::Display for AccuracyExpectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccuracyExpectation::AtLeast(b) => write!(f, ">= {b:.2}"),
            AccuracyExpectation::AtMost(b) => write!(f, "<= {b:.2}"),
        }
    }
}

impl DemoModel {
    /// `None` for the context-free ablation, which has no fixed target.
    pub fn expectation(self) -> Option<AccuracyExpectation> {
        match self {
            DemoModel::Static => Some(AccuracyExpectation::AtMost(0.60)),
            DemoModel::Tada => Some(AccuracyExpectation::AtLeast(0.95)),
            DemoModel::TadaNoContext => None,
        }
    }
}

impl DemoResult {
    pub fn meets_expectation(&self) -> bool {
        self.model.expectation().is_none_or(|e| e.holds(self.test_accuracy))
    }
}

fn accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count()
}

fn evaluate<S: Scalar>(net: &crate::blocks::Network, store: &mut ParamStore<S>, data: &Dataset<S>, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        correct += accuracy(&net.predict(store, &x, Mode::Eval)?, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` with SGD on the ramp-direction task and reports test
/// accuracy (eval-mode batch norm).
pub fn cmd_demo_synthetic<S: Scalar>(task: &SyntheticTaskSpec, model: DemoModel, train: &TrainConfig) -> Result<DemoResult> {
    let start = Instant::now();
    let (train_set, test_set) = task.generate::<S>()?;
    let mut rng = case_rng(task.seed, 2);
    let mut store = ParamStore::<S>::new();
    let net = build_network(&mut store, &model.netspec(task, train.width), &mut rng)?;
    let mut opt = Sgd::new(S::from_f64_lossy(train.lr), S::from_f64_lossy(train.momentum));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::new();
    for epoch in 1..=train.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(train.batch.max(1)) {
            let (x, y) = train_set.batch(chunk)?;
            let mut s = Session::new(&mut store, Mode::Train);
            let xv = s.input(x);
            let logits = net.forward(&mut s, xv)?;
            let loss = s.tape.softmax_cross_entropy(logits, &y)?;
            let l = s.value(loss).item()?.as_f64();
            if !l.is_finite() {
                return Err(Error::Divergence(format!("{}: loss became {l} at epoch {epoch}", model.name())));
            }
            loss_sum += l * chunk.len() as f64;
            correct += accuracy(s.value(logits), &y);
            let grads = s.tape.backward(loss)?;
            let pg = s.param_grads(&grads);
            opt.step(&mut store, &pg)?;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
        };
        curve.push(rec);
        if train.target_train_accuracy.is_some_and(|a| rec.train_accuracy >= a) {
            break;
        }
    }
    let test_accuracy = evaluate(&net, &mut store, &test_set, 64)?;
    let reversed_accuracy = evaluate(&net, &mut store, &test_set.time_reversed()?, 64)?;
    Ok(DemoResult { model, curve, test_accuracy, reversed_accuracy, wall: start.elapsed() })
}
