//! Aggregation variants, residual blocks and whole networks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tada_core::blocks::{
    aggregate, build_network, AggregationParams, AggregationSpec, BlockSpec, BlockVariantFlags, Bottleneck, ConvKind,
    NetSpec, PoolKind, PRESETS,
};
use tada_core::cost::{net_cost, Convention};
use tada_core::nn::Layer;
use tada_core::params::{Mode, ParamStore, Session};
use tada_core::tada::{GeneratorForm, TAdaConv2d, TAdaConvConfig};
use tada_core::{ops, reference, Error, Scalar, Tensor, Tensor64};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set(store: &mut ParamStore<f64>, name: &str, v: Vec<f64>) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::new(&shape, v).unwrap()).unwrap();
}

fn loop_pool(x: &Tensor64, kind: PoolKind, k: usize) -> Tensor64 {
    let avg = reference::temporal_avg_pool(x, k).unwrap();
    let max = reference::temporal_max_pool(x, k).unwrap();
    match kind {
        PoolKind::Avg => avg,
        PoolKind::Max => max,
        PoolKind::Mix => avg.add(&max).unwrap().scale(0.5),
    }
}

/// The aggregation formula each flag combination names, from loop oracles.
fn loop_aggregate(x: &Tensor64, flags: BlockVariantFlags, kind: PoolKind, k: usize, bn1: (&[f64], &[f64]), bn2: (&[f64], &[f64])) -> Tensor64 {
    let eps = 1e-5;
    let bn = |v: &Tensor64, p: (&[f64], &[f64])| reference::batch_norm_train(v, p.0, p.1, eps).unwrap();
    let pre = match (flags.use_aggregation, flags.use_shortcut_branch, flags.separate_bn) {
        (false, _, _) => bn(x, bn1),
        (true, false, _) => bn(&loop_pool(x, kind, k), bn1),
        (true, true, false) => bn(&x.add(&loop_pool(x, kind, k)).unwrap(), bn1),
        (true, true, true) => bn(x, bn1).add(&bn(&loop_pool(x, kind, k), bn2)).unwrap(),
    };
    ops::relu(&pre)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(25))]

    #[test]
    fn every_flag_combination_is_its_named_formula(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.gen_range(1..=4);
        let t = r.gen_range(2..=6);
        let x = Tensor64::randn(&[r.gen_range(1..=2), c, t, 3, 3], 1.0, &mut r);
        let mut draw = |n: usize| (0..n).map(|_| r.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        let (g1, b1, g2, b2) = (draw(c), draw(c), draw(c), draw(c));
        for flags in BlockVariantFlags::all() {
            for pool in [PoolKind::Avg, PoolKind::Max, PoolKind::Mix] {
                let k = r.gen_range(1..=t);
                let mut store = ParamStore::<f64>::new();
                let p = AggregationParams::new(&mut store, "agg", c, &AggregationSpec { flags, pool, k }).unwrap();
                set(&mut store, "agg.gamma", g1.clone());
                set(&mut store, "agg.beta", b1.clone());
                if p.bn2.is_some() {
                    set(&mut store, "agg_pool.gamma", g2.clone());
                    set(&mut store, "agg_pool.beta", b2.clone());
                }
                let y = aggregate(&mut store, &p, &x, Mode::Train).unwrap();
                let oracle = loop_aggregate(&x, flags, pool, k, (&g1, &b1), (&g2, &b2));
                prop_assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-12, "{:?} {:?}", flags, pool);
            }
        }
    }

    #[test]
    fn zero_pool_norm_reduces_to_the_unaggregated_block(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor64::randn(&[2, 3, 5, 4, 4], 1.0, &mut r);
        let mut full = ParamStore::<f64>::new();
        let p = AggregationParams::new(&mut full, "agg", 3, &AggregationSpec::default()).unwrap();
        let plain_spec = AggregationSpec {
            flags: BlockVariantFlags { use_aggregation: false, use_shortcut_branch: false, separate_bn: false },
            ..Default::default()
        };
        let mut plain = ParamStore::<f64>::new();
        let q = AggregationParams::new(&mut plain, "agg", 3, &plain_spec).unwrap();
        let a = aggregate(&mut full, &p, &x, Mode::Train).unwrap();
        let b = aggregate(&mut plain, &q, &x, Mode::Train).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn residual_blocks_preserve_shape(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.gen_range(2..=6);
        let t = r.gen_range(3..=5);
        for kind in [ConvKind::Spatial, ConvKind::Tada, ConvKind::TemporalSpatial, ConvKind::ThreeD] {
            let spec = BlockSpec {
                c_in: c,
                mid: r.gen_range(2..=4),
                c_out: c,
                stride: 1,
                conv_kind: kind,
                tada: TAdaConvConfig { reduction_ratio: 1, ..Default::default() },
                aggregation: AggregationSpec::default(),
            };
            let mut store = ParamStore::<f64>::new();
            let block = Bottleneck::new(&mut store, "b", &spec, t, &mut r).unwrap();
            let x = Tensor64::randn(&[2, c, t, 5, 5], 1.0, &mut r);
            let mut s = Session::inference(&mut store, Mode::Train);
            let xv = s.input(x.clone());
            let y = block.forward(&mut s, xv).unwrap();
            prop_assert_eq!(s.value(y).shape(), x.shape());
        }
    }
}

#[test]
fn pooled_branch_of_a_static_clip_doubles_normalised_input() {
    let mut r = rng(1);
    let frame = Tensor64::randn(&[4, 2, 1, 3, 3], 1.0, &mut r);
    let frame = reference::batch_norm_train(&frame, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
    let x = Tensor64::from_fn(&[4, 2, 6, 3, 3], |i| frame.at(&[i[0], i[1], 0, i[3], i[4]]).unwrap());
    let mut store = ParamStore::<f64>::new();
    let p = AggregationParams::new(&mut store, "agg", 2, &AggregationSpec::default()).unwrap();
    set(&mut store, "agg_pool.gamma", vec![1.0, 1.0]);
    let pooled = ops::temporal_avg_pool(&x, 3).unwrap();
    assert!(pooled.max_abs_diff(&x).unwrap() <= 1e-15);
    let y = aggregate(&mut store, &p, &x, Mode::Train).unwrap();
    assert!(y.max_abs_diff(&ops::relu(&x.scale(2.0))).unwrap() <= 1e-4);
}

#[test]
fn pooling_window_longer_than_clip_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let p = AggregationParams::new(&mut store, "agg", 2, &AggregationSpec { k: 5, ..Default::default() }).unwrap();
    let x = Tensor64::zeros(&[1, 2, 3, 2, 2]);
    assert!(matches!(aggregate(&mut store, &p, &x, Mode::Train), Err(Error::Parameter(_))));
}

#[test]
fn identity_initialised_tada_block_matches_spatial_block() {
    let mut r = rng(2);
    let spec = |kind| BlockSpec {
        c_in: 6,
        mid: 4,
        c_out: 8,
        stride: 2,
        conv_kind: kind,
        tada: TAdaConvConfig::default(),
        aggregation: AggregationSpec::default(),
    };
    let mut plain = ParamStore::<f64>::new();
    let a = Bottleneck::new(&mut plain, "b", &spec(ConvKind::Spatial), 4, &mut r).unwrap();
    let mut tada = ParamStore::<f64>::new();
    let b = Bottleneck::new(&mut tada, "b", &spec(ConvKind::Tada), 4, &mut r).unwrap();
    assert!(tada.copy_matching(&plain) > 0);
    let x = Tensor64::randn(&[2, 6, 4, 8, 8], 1.0, &mut r);
    let run = |store: &mut ParamStore<f64>, block: &Bottleneck| {
        let mut s = Session::inference(store, Mode::Train);
        let xv = s.input(x.clone());
        let y = block.forward(&mut s, xv).unwrap();
        s.value(y).clone()
    };
    assert!(run(&mut plain, &a).max_abs_diff(&run(&mut tada, &b)).unwrap() <= 1e-12);
}

fn tiny_pair<S: Scalar>(seed: u64) -> [(tada_core::blocks::Network, ParamStore<S>); 2] {
    let mut r = rng(seed);
    let mut plain = ParamStore::<S>::new();
    let a = build_network(&mut plain, &NetSpec::preset("r2d-tiny").unwrap(), &mut r).unwrap();
    let mut tada = ParamStore::<S>::new();
    let b = build_network(&mut tada, &NetSpec::preset("tada2d-tiny").unwrap(), &mut r).unwrap();
    tada.copy_matching(&plain);
    [(a, plain), (b, tada)]
}

#[test]
fn tiny_tada_network_equals_tiny_plain_network_at_init() {
    let [(a, mut pa), (b, mut pb)] = tiny_pair::<f64>(3);
    let [(a32, mut pa32), (b32, mut pb32)] = tiny_pair::<f32>(3);
    let mut r = rng(4);
    for _ in 0..20 {
        let x = Tensor64::randn(&[2, 3, 4, 8, 8], 1.0, &mut r);
        for mode in [Mode::Train, Mode::Eval] {
            let d = a.predict(&mut pa, &x, mode).unwrap().max_abs_diff(&b.predict(&mut pb, &x, mode).unwrap()).unwrap();
            assert!(d <= 1e-12, "f64 {mode:?}: {d:e}");
            let x32 = x.cast::<f32>();
            let d = a32.predict(&mut pa32, &x32, mode).unwrap().max_abs_diff(&b32.predict(&mut pb32, &x32, mode).unwrap()).unwrap();
            assert!(d <= 1e-6, "f32 {mode:?}: {d:e}");
        }
    }
}

#[test]
fn built_parameter_count_equals_static_count() {
    for name in PRESETS {
        let spec = NetSpec::preset(name).unwrap();
        let mut store = ParamStore::<f32>::new();
        build_network(&mut store, &spec, &mut rng(5)).unwrap();
        let counted = net_cost(&spec, Convention::Executable).unwrap().total().params;
        assert_eq!(store.num_trainable() as u64, counted, "{name}");
    }
}

#[test]
fn zero_weights_and_zero_input_give_zero_gradients_on_linear_paths() {
    let mut r = rng(6);
    let cfg = TAdaConvConfig { generator: GeneratorForm::Linear, identity_init: false, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let l = TAdaConv2d::new(&mut store, "tada", 4, 3, 3, 1, 1, 4, &cfg, &mut r).unwrap();
    for id in store.trainable_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut s = Session::new(&mut store, Mode::Train);
    let xv = s.tape.leaf(Tensor64::zeros(&[2, 4, 4, 5, 5]), true);
    let y = l.forward(&mut s, xv).unwrap();
    let target = s.tape.constant(Tensor64::randn(&[2, 3, 4, 5, 5], 1.0, &mut r));
    let prod = s.tape.mul(y, target).unwrap();
    let loss = s.tape.sum(prod);
    let grads = s.tape.backward(loss).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&g| g == 0.0));
    for (id, g) in s.param_grads(&grads) {
        assert!(g.data().iter().all(|&v| v == 0.0), "{}", s.store().name(id));
    }
}

#[test]
fn parameter_dump_round_trips_a_network() {
    let mut r = rng(7);
    let spec = NetSpec::preset("tada2d-tiny").unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = build_network(&mut store, &spec, &mut r).unwrap();
    for id in store.trainable_ids() {
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let mut bytes = Vec::new();
    store.write_to(&mut bytes).unwrap();
    let mut back = ParamStore::<f64>::read_from(bytes.as_slice()).unwrap();
    let x = Tensor64::randn(&[2, 3, 4, 8, 8], 1.0, &mut r);
    assert_eq!(net.predict(&mut store, &x, Mode::Eval).unwrap(), net.predict(&mut back, &x, Mode::Eval).unwrap());
}
