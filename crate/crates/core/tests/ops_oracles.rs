//! Fast operators against the naive loop oracles, plus algebraic identities.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tada_core::baseline::{self, TemporalKernel};
use tada_core::ops::{self, BatchNormParams};
use tada_core::params::Mode;
use tada_core::{reference, Tensor64};

const EXACT: f64 = 1e-12;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv3d_matches_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let x = Tensor64::randn(&[r.gen_range(1..=2), ci, r.gen_range(1..=5), r.gen_range(3..=6), r.gen_range(3..=6)], 1.0, &mut r);
        let k = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
        let w = Tensor64::randn(&[co, ci, k[0], k[1], k[2]], 1.0, &mut r);
        let stride = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2)];
        let pad = [r.gen_range(0..=1), r.gen_range(0..=1), r.gen_range(0..=1)];
        let fast = baseline::conv3d(&x, &w, stride, pad);
        let slow = reference::conv3d(&x, &w, stride, pad);
        match (fast, slow) {
            (Ok(a), Ok(b)) => prop_assert!(a.max_abs_diff(&b).unwrap() <= EXACT),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn conv2d_matches_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co, k) = (r.gen_range(1..=3), r.gen_range(1..=3), [1, 3, 5][r.gen_range(0..3)]);
        let x = Tensor64::randn(&[r.gen_range(1..=2), ci, r.gen_range(1..=3), r.gen_range(5..=7), r.gen_range(5..=7)], 1.0, &mut r);
        let w = Tensor64::randn(&[co, ci, k, k], 1.0, &mut r);
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
        let a = ops::conv2d_per_frame(&x, &w, stride, pad).unwrap();
        let b = reference::conv2d_per_frame(&x, &w, stride, pad).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
    }

    #[test]
    fn conv1d_matches_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co, k) = (r.gen_range(1..=4), r.gen_range(1..=4), [1, 3, 5][r.gen_range(0..3)]);
        let v = Tensor64::randn(&[r.gen_range(1..=2), ci, r.gen_range(1..=8)], 1.0, &mut r);
        let w = Tensor64::randn(&[co, ci, k], 1.0, &mut r);
        let a = ops::conv1d_temporal(&v, &w, 1, k / 2).unwrap();
        let b = reference::conv1d(&v, &w, 1, k / 2).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
    }

    #[test]
    fn depthwise_temporal_matches_loop_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, kt) = (r.gen_range(1..=4), [1, 3, 5][r.gen_range(0..3)]);
        let x = Tensor64::randn(&[r.gen_range(1..=2), c, r.gen_range(1..=6), 3, 4], 1.0, &mut r);
        let beta = Tensor64::randn(&[c, kt], 1.0, &mut r);
        let a = baseline::depthwise_temporal_conv(&x, &TemporalKernel::new(beta.clone()).unwrap()).unwrap();
        let b = reference::depthwise_temporal(&x, &beta).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
    }

    #[test]
    fn pooling_and_gap_match_loop_oracles(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = r.gen_range(1..=6);
        let k = r.gen_range(1..=t);
        let x = Tensor64::randn(&[r.gen_range(1..=2), r.gen_range(1..=3), t, r.gen_range(1..=4), r.gen_range(1..=4)], 1.0, &mut r);
        let pairs = [
            (ops::temporal_avg_pool(&x, k).unwrap(), reference::temporal_avg_pool(&x, k).unwrap()),
            (ops::temporal_max_pool(&x, k).unwrap(), reference::temporal_max_pool(&x, k).unwrap()),
            (ops::gap_spatial(&x).unwrap(), reference::gap_spatial(&x).unwrap()),
            (ops::gap_spatiotemporal(&x).unwrap(), reference::gap_spatiotemporal(&x).unwrap()),
        ];
        for (a, b) in pairs {
            prop_assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
        }
    }

    #[test]
    fn batchnorm_train_matches_loop_oracle_and_normalises(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.gen_range(1..=3);
        let x = Tensor64::randn(&[r.gen_range(1..=3), c, r.gen_range(2..=4), 3, 3], 2.0, &mut r).map(|v| v + 0.7);
        let mut p = BatchNormParams::<f64>::new(c);
        let y = ops::batchnorm(&x, &mut p, Mode::Train).unwrap();
        let yr = reference::batch_norm_train(&x, &p.gamma, &p.beta, p.eps).unwrap();
        prop_assert!(y.max_abs_diff(&yr).unwrap() <= EXACT);
        let inner: usize = y.shape()[2..].iter().product();
        let per = y.numel() / c;
        for ch in 0..c {
            let vals: Vec<f64> = (0..y.numel()).filter(|i| (i / inner) % c == ch).map(|i| y.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / per as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - 1.0).abs() <= 1e-3, "var {}", var);
        }
    }

    #[test]
    fn convolutions_are_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let shape = [1, 2, 3, 5, 5];
        let x = Tensor64::randn(&shape, 1.0, &mut r);
        let y = Tensor64::randn(&shape, 1.0, &mut r);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let w2 = Tensor64::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let w3 = Tensor64::randn(&[3, 2, 3, 3, 3], 1.0, &mut r);
        let conv2 = |v: &Tensor64| ops::conv2d_per_frame(v, &w2, 1, 1).unwrap();
        let conv3 = |v: &Tensor64| baseline::conv3d(v, &w3, [1, 1, 1], [1, 1, 1]).unwrap();
        for conv in [&conv2 as &dyn Fn(&Tensor64) -> Tensor64, &conv3] {
            let lhs = conv(&mix);
            let rhs = conv(&x).scale(a).add(&conv(&y).scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn spatiotemporal_gap_is_mean_of_frame_gaps(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = r.gen_range(1..=6);
        let x = Tensor64::randn(&[2, 3, t, r.gen_range(1..=5), r.gen_range(1..=5)], 1.0, &mut r);
        let frames = ops::gap_spatial(&x).unwrap();
        let whole = ops::gap_spatiotemporal(&x).unwrap();
        for (i, row) in frames.data().chunks(t).enumerate() {
            let m = row.iter().sum::<f64>() / t as f64;
            prop_assert!((m - whole.data()[i]).abs() <= EXACT);
        }
    }

    #[test]
    fn unit_sum_temporal_kernel_keeps_constant_interior(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, t) = (r.gen_range(1..=3), r.gen_range(3..=6));
        let taps: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s: f64 = taps.iter().sum();
        let beta = Tensor64::from_fn(&[c, 3], |i| taps[i[1]] - (s - 1.0) / 3.0);
        let level = Tensor64::randn(&[1, c, 1, 2, 2], 1.0, &mut r);
        let x = Tensor64::from_fn(&[1, c, t, 2, 2], |i| level.at(&[0, i[1], 0, i[3], i[4]]).unwrap());
        let y = baseline::depthwise_temporal_conv(&x, &TemporalKernel::new(beta).unwrap()).unwrap();
        for ch in 0..c {
            for f in 1..t - 1 {
                for p in 0..2 {
                    let d = y.at(&[0, ch, f, p, p]).unwrap() - x.at(&[0, ch, f, p, p]).unwrap();
                    prop_assert!(d.abs() <= EXACT);
                }
            }
        }
    }

    #[test]
    fn temporal_equivalence_holds_both_forms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co, taps) = (r.gen_range(1..=4), r.gen_range(1..=4), [1, 3, 5][r.gen_range(0..3)]);
        let x = Tensor64::randn(&[1, ci, r.gen_range(2..=6), r.gen_range(3..=5), r.gen_range(3..=5)], 1.0, &mut r);
        let w = Tensor64::randn(&[co, ci, 3, 3], 1.0, &mut r);
        let beta = TemporalKernel::new(Tensor64::randn(&[co, taps], 1.0, &mut r)).unwrap();
        let masked = baseline::temporal_conv_equivalence_oracle(&x, &w, &beta, 1, 1).unwrap();
        let grouped = baseline::grouped_equivalence_oracle(&x, &w, &beta, 1, 1).unwrap();
        prop_assert!(masked.max_abs_diff <= 1e-10);
        prop_assert!(grouped.max_abs_diff <= 1e-10);
    }
}

#[test]
fn center_slice_3d_kernel_is_a_2d_conv() {
    let mut r = rng(3);
    let x = Tensor64::randn(&[2, 3, 4, 6, 6], 1.0, &mut r);
    let w2 = Tensor64::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let w3 = Tensor64::from_fn(&[2, 3, 3, 3, 3], |i| if i[2] == 1 { w2.at(&[i[0], i[1], i[3], i[4]]).unwrap() } else { 0.0 });
    let a = baseline::conv3d(&x, &w3, [1, 1, 1], [1, 1, 1]).unwrap();
    let b = ops::conv2d_per_frame(&x, &w2, 1, 1).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
}

#[test]
fn inflated_kernel_on_static_clip_is_a_2d_conv() {
    let mut r = rng(4);
    let frame = Tensor64::randn(&[1, 2, 1, 5, 5], 1.0, &mut r);
    let x = Tensor64::from_fn(&[1, 2, 3, 5, 5], |i| frame.at(&[0, i[1], 0, i[3], i[4]]).unwrap());
    let w2 = Tensor64::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let w3 = Tensor64::from_fn(&[3, 2, 3, 3, 3], |i| w2.at(&[i[0], i[1], i[3], i[4]]).unwrap() / 3.0);
    let a = baseline::conv3d(&x, &w3, [1, 1, 1], [0, 1, 1]).unwrap();
    let b = ops::conv2d_per_frame(&frame, &w2, 1, 1).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= EXACT);
}

#[test]
fn shift_then_reverse_shift_restores_interior() {
    let mut r = rng(5);
    let x = Tensor64::randn(&[1, 8, 5, 2, 2], 1.0, &mut r);
    // Channels 0-1 are delayed and 2-3 advanced; the rest stay put.
    let there = baseline::temporal_shift(&x, 0.25, 0.25).unwrap();
    let advanced = baseline::temporal_shift(&there, 0.0, 0.25).unwrap();
    let delayed = baseline::temporal_shift(&there, 0.5, 0.0).unwrap();
    for t in 1..4 {
        for p in 0..2 {
            for c in 0..2 {
                assert_eq!(advanced.at(&[0, c, t, p, p]).unwrap(), x.at(&[0, c, t, p, p]).unwrap());
            }
            for c in 2..4 {
                assert_eq!(delayed.at(&[0, c, t, p, p]).unwrap(), x.at(&[0, c, t, p, p]).unwrap());
            }
            for c in 4..8 {
                assert_eq!(there.at(&[0, c, t, p, p]).unwrap(), x.at(&[0, c, t, p, p]).unwrap());
            }
        }
    }
}
