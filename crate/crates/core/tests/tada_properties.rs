//! Properties of calibration generation and the calibrated convolution.

use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tada_core::harness::materialize_kernels;
use tada_core::nn::Layer;
use tada_core::params::{Mode, ParamStore, Session, Sgd};
use tada_core::tada::{
    tadaconv_forward, CalibrationDim, CalibrationMode, CalibrationSource, GeneratorForm, TAdaConv2d, TAdaConvConfig,
};
use tada_core::{ops, reference, Scalar, Tensor, Tensor64};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn layer<S: Scalar>(store: &mut ParamStore<S>, cfg: &TAdaConvConfig, ci: usize, co: usize, t: usize, r: &mut ChaCha8Rng) -> TAdaConv2d {
    TAdaConv2d::new(store, "tada", ci, co, 3, 1, 1, t, cfg, r).unwrap()
}

/// Overwrites every trainable tensor with draws from `sample`.
fn refill<S: Scalar>(store: &mut ParamStore<S>, mut sample: impl FnMut() -> f64) {
    for id in store.trainable_ids() {
        for v in store.get_mut(id).data_mut() {
            *v = S::from_f64_lossy(sample());
        }
    }
}

fn every_config() -> Vec<TAdaConvConfig> {
    let mut out = Vec::new();
    for generator in [GeneratorForm::Linear, GeneratorForm::NonLinear] {
        for calibration_dim in CalibrationDim::ALL {
            for use_global in [false, true] {
                for source in [CalibrationSource::Dynamic, CalibrationSource::Learnable, CalibrationSource::None] {
                    for temporally_varying in [false, true] {
                        out.push(TAdaConvConfig {
                            generator,
                            calibration_dim,
                            use_global,
                            mode: CalibrationMode { source, temporally_varying },
                            ..Default::default()
                        });
                    }
                }
            }
        }
    }
    out
}

/// Largest `|alpha(reverse x) - reverse(alpha(x))|`.
fn reversal_gap(layer: &TAdaConv2d, store: &mut ParamStore<f64>, x: &Tensor64) -> f64 {
    let a = layer.generate_calibration(store, x, Mode::Eval).unwrap().alpha;
    let b = layer.generate_calibration(store, &x.flip(2).unwrap(), Mode::Eval).unwrap().alpha;
    a.flip(2).unwrap().max_abs_diff(&b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identity_init_is_plain_conv_for_every_config(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co, t) = (r.gen_range(4..=6), r.gen_range(1..=4), r.gen_range(1..=5));
        for cfg in every_config() {
            let mut store = ParamStore::<f64>::new();
            let l = layer(&mut store, &cfg, ci, co, t, &mut r);
            let x = Tensor64::randn(&[2, ci, t, 5, 5], 1.0, &mut r);
            let alpha = l.generate_calibration(&mut store, &x, Mode::Train).unwrap().alpha;
            prop_assert!(alpha.data().iter().all(|&a| a == 1.0), "{:?}", cfg);
            let y = tadaconv_forward(&l, &mut store, &x, Mode::Train).unwrap();
            let plain = ops::conv2d_per_frame(&x, store.get(l.weight), 1, 1).unwrap();
            prop_assert!(y.max_abs_diff(&plain).unwrap() <= 1e-12, "{:?}", cfg);

            let mut s32 = store.cast::<f32>();
            let x32 = x.cast::<f32>();
            let y32 = tadaconv_forward(&l, &mut s32, &x32, Mode::Train).unwrap();
            let plain32 = ops::conv2d_per_frame(&x32, s32.get(l.weight), 1, 1).unwrap();
            prop_assert!(y32.max_abs_diff(&plain32).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn loaded_base_kernel_behaves_as_plain_conv(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, &TAdaConvConfig::default(), 4, 3, 4, &mut r);
        let pretrained = Tensor64::randn(&[3, 4, 3, 3], 2.0, &mut r);
        store.set(l.weight, pretrained.clone()).unwrap();
        for _ in 0..20 {
            let x = Tensor64::randn(&[1, 4, 4, 6, 6], 1.0, &mut r);
            let y = tadaconv_forward(&l, &mut store, &x, Mode::Train).unwrap();
            prop_assert!(y.max_abs_diff(&ops::conv2d_per_frame(&x, &pretrained, 1, 1).unwrap()).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn perturbations_stay_within_the_local_receptive_field(seed in any::<u64>()) {
        let mut r = rng(seed);
        let odd = [1, 3, 5];
        let cfg = TAdaConvConfig {
            generator: if r.gen() { GeneratorForm::Linear } else { GeneratorForm::NonLinear },
            k1: odd[r.gen_range(0..3)],
            k2: odd[r.gen_range(0..3)],
            use_global: false,
            calibration_dim: CalibrationDim::ALL[r.gen_range(0..4)],
            identity_init: false,
            ..Default::default()
        };
        let t = 9;
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, &cfg, 4, 3, t, &mut r);
        refill(&mut store, || r.gen_range(-0.5..0.5));
        let x = Tensor64::randn(&[1, 4, t, 4, 4], 1.0, &mut r);
        let hit = r.gen_range(0..t);
        let mut bumped = x.clone();
        for c in 0..4 {
            bumped.set(&[0, c, hit, 1, 2], x.at(&[0, c, hit, 1, 2]).unwrap() + 3.0).unwrap();
        }
        let a = tadaconv_forward(&l, &mut store, &x, Mode::Eval).unwrap();
        let b = tadaconv_forward(&l, &mut store, &bumped, Mode::Eval).unwrap();
        let reach = cfg.receptive_half_width();
        for f in 0..t {
            let changed = (0..3).any(|c| (0..16).any(|p| a.at(&[0, c, f, p / 4, p % 4]).unwrap() != b.at(&[0, c, f, p / 4, p % 4]).unwrap()));
            if f.abs_diff(hit) > reach {
                prop_assert!(!changed, "frame {} changed by a bump at {} (reach {})", f, hit, reach);
            }
            if f == hit {
                prop_assert!(changed);
            }
        }
    }

    #[test]
    fn uncalibrated_rows_keep_the_base_kernel_bitwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ci = r.gen_range(2..=7);
        let den = r.gen_range(2..=5);
        let cfg = TAdaConvConfig {
            calibration_dim: CalibrationDim::ALL[r.gen_range(0..4)],
            calibrated_fraction: Ratio::new(r.gen_range(1..den), den),
            identity_init: false,
            reduction_ratio: 1,
            ..Default::default()
        };
        let m = cfg.calibrated_channels(ci);
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, &cfg, ci, 3, 4, &mut r);
        refill(&mut store, || r.gen_range(-1.0..1.0));
        let x = Tensor64::randn(&[2, ci, 4, 5, 5], 1.0, &mut r);
        let base = store.get(l.weight).clone();
        let mut s = Session::inference(&mut store, Mode::Train);
        let xv = s.input(x);
        let kv = l.frame_kernels(&mut s, xv).unwrap().unwrap();
        let kernels = s.value(kv);
        let mut calibrated_differs = false;
        for idx in 0..kernels.numel() {
            let [n, t, o, i, a, b] = unravel(idx, kernels.shape());
            let (got, w) = (kernels.at(&[n, t, o, i, a, b]).unwrap(), base.at(&[o, i, a, b]).unwrap());
            if i >= m {
                prop_assert_eq!(got.to_bits(), w.to_bits());
            } else {
                calibrated_differs |= got != w;
            }
        }
        prop_assert!(calibrated_differs);
    }

    #[test]
    fn calibrated_conv_matches_materialized_kernels(seed in any::<u64>()) {
        let mut r = rng(seed);
        for dim in CalibrationDim::ALL {
            let cfg = TAdaConvConfig { calibration_dim: dim, identity_init: false, ..Default::default() };
            let (ci, co, t) = (r.gen_range(4..=6), r.gen_range(1..=4), r.gen_range(1..=5));
            let mut store = ParamStore::<f64>::new();
            let l = layer(&mut store, &cfg, ci, co, t, &mut r);
            refill(&mut store, || r.gen_range(-1.0..1.0));
            let x = Tensor64::randn(&[2, ci, t, 5, 5], 1.0, &mut r);
            let cal = l.generate_calibration(&mut store, &x, Mode::Train).unwrap();
            let kernels = materialize_kernels(store.get(l.weight), &cal, ci, 2, t).unwrap();
            let y = tadaconv_forward(&l, &mut store, &x, Mode::Train).unwrap();
            let oracle = reference::conv2d_frame_kernels(&x, &kernels, 1, 1).unwrap();
            prop_assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-12, "{:?}", dim);
        }
    }

    #[test]
    fn pointwise_generator_without_global_is_constant_on_static_clips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = TAdaConvConfig { k1: 1, k2: 1, use_global: false, identity_init: false, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, &cfg, 4, 2, 6, &mut r);
        refill(&mut store, || r.gen_range(-1.0..1.0));
        let frame = Tensor64::randn(&[2, 4, 1, 3, 3], 1.0, &mut r);
        let x = Tensor64::from_fn(&[2, 4, 6, 3, 3], |i| frame.at(&[i[0], i[1], 0, i[3], i[4]]).unwrap());
        let alpha = l.generate_calibration(&mut store, &x, Mode::Train).unwrap().alpha;
        for (n, row) in alpha.data().chunks(6).enumerate() {
            prop_assert!(row.iter().all(|&v| v == row[0]), "row {}: {:?}", n, row);
        }
    }

    #[test]
    fn shared_and_learnable_modes_have_their_stated_shape(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = 5;
        let x = Tensor64::randn(&[2, 4, t, 3, 3], 1.0, &mut r);
        let y = Tensor64::randn(&[2, 4, t, 3, 3], 1.0, &mut r);
        for (source, varying) in [(CalibrationSource::Dynamic, false), (CalibrationSource::Learnable, true), (CalibrationSource::Learnable, false)] {
            let cfg = TAdaConvConfig {
                generator: GeneratorForm::Linear,
                mode: CalibrationMode { source, temporally_varying: varying },
                identity_init: false,
                ..Default::default()
            };
            let mut store = ParamStore::<f64>::new();
            let l = layer(&mut store, &cfg, 4, 2, t, &mut r);
            refill(&mut store, || r.gen_range(-1.0..1.0));
            let ax = l.generate_calibration(&mut store, &x, Mode::Eval).unwrap().alpha;
            let ay = l.generate_calibration(&mut store, &y, Mode::Eval).unwrap().alpha;
            let frames = if varying { t } else { 1 };
            match source {
                CalibrationSource::Learnable => {
                    prop_assert_eq!(ax.shape(), &[1, 4, frames][..]);
                    prop_assert_eq!(&ax, &ay);
                }
                _ => {
                    prop_assert_eq!(ax.shape(), &[2, 4, 1][..]);
                    prop_assert!(ax.max_abs_diff(&ay).unwrap() > 0.0);
                }
            }
        }
    }
}

fn unravel(mut idx: usize, shape: &[usize]) -> [usize; 6] {
    let mut out = [0; 6];
    for d in (0..6).rev() {
        out[d] = idx % shape[d];
        idx /= shape[d];
    }
    out
}

#[test]
fn one_sgd_step_moves_alpha_off_one() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, &TAdaConvConfig::default(), 4, 4, 4, &mut r);
    let x = Tensor64::randn(&[2, 4, 4, 5, 5], 1.0, &mut r);
    let target = Tensor64::randn(&[2, 4, 4, 5, 5], 1.0, &mut r);
    let before = l.generate_calibration(&mut store, &x, Mode::Train).unwrap().alpha;
    assert!(before.data().iter().all(|&a| a == 1.0));

    let mut s = Session::new(&mut store, Mode::Train);
    let xv = s.input(x.clone());
    let y = l.forward(&mut s, xv).unwrap();
    let tv = s.tape.constant(target);
    let prod = s.tape.mul(y, tv).unwrap();
    let loss = s.tape.sum(prod);
    let grads = s.tape.backward(loss).unwrap();
    let pg = s.param_grads(&grads);
    Sgd::new(0.1, 0.0).step(&mut store, &pg).unwrap();

    let after = l.generate_calibration(&mut store, &x, Mode::Train).unwrap().alpha;
    let moved = after.data().iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max);
    assert!(moved > 0.0, "alpha stayed at one");
}

#[test]
fn frame_reversal_commutes_with_pointwise_global_calibration() {
    // Dyadic inputs and weights keep every sum over time exact, so the
    // reversed clip reproduces the reversed calibration bit for bit.
    let mut r = rng(21);
    for generator in [GeneratorForm::Linear, GeneratorForm::NonLinear] {
        let cfg = TAdaConvConfig { generator, k1: 1, k2: 1, use_global: true, identity_init: false, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, &cfg, 8, 4, 8, &mut r);
        refill(&mut store, || r.gen_range(-8i32..=8) as f64 / 8.0);
        for _ in 0..10 {
            let x = Tensor::from_fn(&[2, 8, 8, 4, 4], |_| r.gen_range(-16i32..=16) as f64 / 8.0);
            assert_eq!(reversal_gap(&l, &mut store, &x), 0.0, "{generator:?}");
        }
    }
}

#[test]
fn temporal_context_breaks_reversal_symmetry() {
    let mut r = rng(22);
    let cfg = TAdaConvConfig { identity_init: false, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, &cfg, 8, 4, 8, &mut r);
    refill(&mut store, || r.gen_range(-1.0..1.0));
    let x = Tensor64::randn(&[1, 8, 8, 4, 4], 1.0, &mut r);
    let gap = reversal_gap(&l, &mut store, &x);
    assert!(gap > 1e-3, "calibration looked reversal-equivariant (gap {gap:e})");
}

#[test]
fn global_descriptor_spreads_a_perturbation_to_every_frame() {
    let mut r = rng(23);
    let cfg = TAdaConvConfig {
        generator: GeneratorForm::Linear,
        k1: 1,
        use_global: true,
        identity_init: false,
        ..Default::default()
    };
    let t = 8;
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, &cfg, 4, 2, t, &mut r);
    refill(&mut store, || r.gen_range(-1.0..1.0));
    let x = Tensor64::randn(&[1, 4, t, 4, 4], 1.0, &mut r);
    let mut bumped = x.clone();
    bumped.set(&[0, 0, 0, 0, 0], x.at(&[0, 0, 0, 0, 0]).unwrap() + 3.0).unwrap();
    let a = tadaconv_forward(&l, &mut store, &x, Mode::Eval).unwrap();
    let b = tadaconv_forward(&l, &mut store, &bumped, Mode::Eval).unwrap();
    let last = |y: &Tensor64| y.at(&[0, 0, t - 1, 2, 2]).unwrap();
    assert_ne!(last(&a), last(&b));
}
