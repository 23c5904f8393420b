mod common;

use common::{gradient_support, randn, rng};
use proptest::prelude::*;
use seqop_core::gradcheck::{gradcheck_many, DEFAULT_EPS};
use seqop_core::tape::{Tape, Var};
use seqop_core::tcn::{receptive_field, tcn_block, tcn_forward, BlockOptions, TcnConfig, TcnStack};
use seqop_core::{Bound, ParamStore, Tensor};

fn stack(
    cfg: TcnConfig,
    channels: usize,
    options: BlockOptions,
    seed: u64,
) -> (TcnStack, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let s = TcnStack::new(cfg, channels, options, &mut store, "tcn", &mut rng(seed)).unwrap();
    (s, store)
}

/// Gradient support of output position `t` on a channels-last input.
fn support(s: &TcnStack, store: &ParamStore<f64>, x: &Tensor<f64>, t: usize) -> Vec<usize> {
    gradient_support(x, 1, t, |tape, xv| {
        let p = store.bind_frozen(tape);
        s.forward(tape, &p, xv).unwrap()
    })
}

#[test]
fn empirical_receptive_field_matches_formula_over_grid() {
    let mut checked = 0;
    for k in [2, 3, 17] {
        for f in [1, 2, 3] {
            for d in [1, 2, 4] {
                for b in [1, 2] {
                    let cfg = TcnConfig::new(k, f, d, b).unwrap();
                    let rf = receptive_field(&cfg) as usize;
                    let (s, store) = stack(
                        cfg,
                        3,
                        BlockOptions::default(),
                        (k * 100 + f * 10 + d + b) as u64,
                    );
                    let len = rf + 6;
                    let x = randn(&[1, len, 3], 1);
                    for t in [rf / 2, len - 1] {
                        let sup = support(&s, &store, &x, t);
                        // Dilations above K leave holes inside the window, so the
                        // field is measured as the span back to the earliest tap.
                        assert_eq!(
                            *sup.last().unwrap(),
                            t,
                            "K={k} f={f} D={d} B={b}: output must see its own step"
                        );
                        let span = t - sup[0] + 1;
                        if t + 1 >= rf {
                            assert_eq!(span, rf, "K={k} f={f} D={d} B={b} t={t}");
                        } else if f <= k {
                            // No holes, so a truncated window reaches position 0.
                            assert_eq!(span, t + 1, "K={k} f={f} D={d} B={b} t={t}");
                        }
                    }
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 54);
}

#[test]
fn three_by_three_window_at_step_twenty() {
    let cfg = TcnConfig::new(3, 3, 2, 1).unwrap();
    assert_eq!(receptive_field(&cfg), 9);
    let (s, store) = stack(cfg, 4, BlockOptions::default(), 2);
    let x = randn(&[2, 32, 4], 3);
    assert_eq!(support(&s, &store, &x, 20), (12..=20).collect::<Vec<_>>());
}

#[test]
fn zero_weights_give_identity() {
    let cfg = TcnConfig::new(5, 2, 3, 2).unwrap();
    let (s, mut store) = stack(cfg, 4, BlockOptions::default(), 4);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = randn(&[2, 4, 30], 5);
    assert_eq!(tcn_block(&x, &s, 0, &store).unwrap(), x);
    assert_eq!(tcn_forward(&x, &s, &store).unwrap(), x);
}

#[test]
fn current_step_tap_adds_silu() {
    let cfg = TcnConfig::new(3, 1, 1, 1).unwrap();
    let (s, mut store) = stack(
        cfg,
        1,
        BlockOptions {
            norm: false,
            channel_mix: true,
        },
        6,
    );
    let block = &s.blocks[0];
    *store.get_mut(block.kernels[0]) = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    let (w, b) = block.mix.unwrap();
    *store.get_mut(w) = Tensor::ones(&[1, 1]);
    *store.get_mut(b) = Tensor::zeros(&[1]);
    let x = Tensor::new(&[1, 1, 5], vec![-2.0, -0.5, 0.0, 0.5, 3.0]).unwrap();
    let y = tcn_block(&x, &s, 0, &store).unwrap();
    for (&xv, &yv) in x.data().iter().zip(y.data()) {
        let silu = xv / (1.0 + (-xv).exp());
        assert!((yv - (xv + silu)).abs() < 1e-15);
    }
}

#[test]
fn depth_one_is_a_single_block() {
    let cfg = TcnConfig::new(4, 2, 1, 2).unwrap();
    let (s, store) = stack(cfg, 3, BlockOptions::default(), 7);
    let x = randn(&[2, 3, 25], 8);
    assert_eq!(
        tcn_forward(&x, &s, &store).unwrap(),
        tcn_block(&x, &s, 0, &store).unwrap()
    );
}

#[test]
fn stack_is_composition_of_blocks() {
    let cfg = TcnConfig::new(3, 2, 3, 1).unwrap();
    let (s, store) = stack(cfg, 3, BlockOptions::default(), 9);
    let x = randn(&[1, 3, 40], 10);
    let mut h = x.clone();
    for i in 0..3 {
        h = tcn_block(&h, &s, i, &store).unwrap();
    }
    assert!(h.max_abs_diff(&tcn_forward(&x, &s, &store).unwrap()) < 1e-14);
}

#[test]
fn blocks_and_stack_are_causal() {
    let cfg = TcnConfig::new(3, 2, 3, 1).unwrap();
    let (s, store) = stack(cfg, 3, BlockOptions::default(), 11);
    let len = 30;
    let x = randn(&[1, 3, len], 12);
    for t in [0, 13, len - 1] {
        let mut bumped = x.clone();
        for c in 0..3 {
            bumped.data_mut()[c * len + t] += 1.0;
        }
        let runs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..3)
            .map(|i| {
                (
                    tcn_block(&x, &s, i, &store).unwrap(),
                    tcn_block(&bumped, &s, i, &store).unwrap(),
                )
            })
            .chain(std::iter::once((
                tcn_forward(&x, &s, &store).unwrap(),
                tcn_forward(&bumped, &s, &store).unwrap(),
            )))
            .collect();
        for (a, b) in runs {
            for c in 0..3 {
                for u in 0..t {
                    assert_eq!(a.data()[c * len + u], b.data()[c * len + u], "t={t} u={u}");
                }
            }
        }
    }
}

#[test]
fn conv_params_follow_census() {
    let cfg = TcnConfig::new(17, 8, 4, 1).unwrap();
    let (s, store) = stack(cfg, 5, BlockOptions::default(), 13);
    assert_eq!(s.conv_param_count(), 4 * 5 * 17);
    assert_eq!(
        store.numel(),
        TcnStack::param_count(&cfg, 5, BlockOptions::default())
    );
}

#[test]
fn gradients_through_full_stack() {
    let cfg = TcnConfig::new(3, 2, 2, 2).unwrap();
    let (s, store) = stack(cfg, 3, BlockOptions::default(), 14);
    let mut inputs = vec![randn(&[2, 10, 3], 15)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let weights = randn(&[2, 10, 3], 16);
    let r = gradcheck_many(
        |tape: &mut Tape<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = s.forward(tape, &p, v[0])?;
            let w = tape.constant(weights.clone());
            let yw = tape.mul(y, w);
            Ok(tape.sum(yw))
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn single_deep_stack_beats_wide_blocks() {
    for k in [2, 3, 17] {
        for f in [2, 3, 8] {
            for product in [2, 4, 6, 12] {
                let rf = |b: usize| receptive_field(&TcnConfig::new(k, f, product / b, b).unwrap());
                let best = rf(1);
                for b in (2..=product).filter(|b| product % b == 0) {
                    assert!(best > rf(b), "K={k} f={f} B·D={product} B={b}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_shape_is_preserved(k in 1usize..6, f in 1usize..4, d in 1usize..4, e in 1usize..5, len in 1usize..40, seed in any::<u64>()) {
        let cfg = TcnConfig::new(k, f, d, 1).unwrap();
        let (s, store) = stack(cfg, e, BlockOptions::default(), seed);
        let x = randn(&[2, e, len], seed ^ 1);
        let y = tcn_forward(&x, &s, &store).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }
}
