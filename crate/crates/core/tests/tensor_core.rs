mod common;

use common::{direct_causal_conv, randn, rng};
use proptest::prelude::*;
use seqop_core::fft::fft_circular_convolve;
use seqop_core::gradcheck::{gradcheck, gradcheck_many, DEFAULT_EPS};
use seqop_core::ops::{conv1d_dilated, softmax_rows, ConvLayout};
use seqop_core::tape::{Tape, Var};
use seqop_core::Tensor;

fn t1(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

#[test]
fn fft_matches_direct_convolution_f64() {
    for (i, &len) in [1usize, 2, 255, 256, 4096].iter().enumerate() {
        let x = randn(&[len], 10 + i as u64);
        let k = randn(&[len], 20 + i as u64);
        let y = fft_circular_convolve(&x, &k).unwrap();
        let want = direct_causal_conv(x.data(), k.data());
        let err = y
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "L={len}: {err}");
    }
}

#[test]
fn fft_matches_direct_convolution_f32() {
    for (i, &len) in [1usize, 2, 255, 256, 4096].iter().enumerate() {
        let x = randn(&[len], 30 + i as u64);
        let k = randn(&[len], 40 + i as u64).map(|v| v / (len as f64).sqrt());
        let y = fft_circular_convolve(&x.cast::<f32>(), &k.cast::<f32>()).unwrap();
        let want = direct_causal_conv(x.data(), k.data());
        let err = y
            .data()
            .iter()
            .zip(&want)
            .map(|(&a, b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "L={len}: {err}");
    }
}

#[test]
fn fft_examples() {
    let y = fft_circular_convolve(&t1(&[1.0, 0.0, 0.0]), &t1(&[1.0])).unwrap();
    assert!(y.max_abs_diff(&t1(&[1.0, 0.0, 0.0])) < 1e-15);
    let y = fft_circular_convolve(&t1(&[1.0; 4]), &t1(&[1.0, 1.0])).unwrap();
    assert!(y.max_abs_diff(&t1(&[1.0, 2.0, 2.0, 2.0])) < 1e-12);
    assert!(fft_circular_convolve(&Tensor::<f64>::zeros(&[0]), &t1(&[1.0])).is_err());
}

#[test]
fn fft_rows_are_independent() {
    let x = randn(&[3, 2, 17], 5);
    let k = randn(&[3, 2, 5], 6);
    let y = fft_circular_convolve(&x, &k).unwrap();
    for r in 0..6 {
        let want = direct_causal_conv(
            &x.data()[r * 17..(r + 1) * 17],
            &k.data()[r * 5..(r + 1) * 5],
        );
        for (a, b) in y.data()[r * 17..(r + 1) * 17].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn conv_1d(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let x = Tensor::new(&[1, 1, x.len()], x.to_vec()).unwrap();
    let w = Tensor::new(&[1, w.len()], w.to_vec()).unwrap();
    conv1d_dilated(&x, &w, d, true).unwrap().into_data()
}

#[test]
fn conv_examples() {
    assert_eq!(
        conv_1d(&[1.0, 0.0, 0.0, 0.0], &[1.0], 1),
        [1.0, 0.0, 0.0, 0.0]
    );
    assert_eq!(
        conv_1d(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0], 2),
        [0.0, 0.0, 1.0, 2.0]
    );
    assert_eq!(conv_1d(&[3.0, -1.0, 2.0], &[0.0, 0.0, 0.0], 3), [0.0; 3]);
    // Taps that never land inside the sequence contribute nothing.
    assert_eq!(conv_1d(&[1.0, 2.0], &[1.0, 5.0, 7.0], 4), [1.0, 2.0]);
    let x = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
    assert!(conv1d_dilated(&x, &Tensor::ones(&[1, 1]), 0, true).is_err());
}

#[test]
fn conv_matches_definition() {
    let x = randn(&[2, 3, 40], 1);
    let w = randn(&[3, 4], 2);
    let y = conv1d_dilated(&x, &w, 3, true).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            for t in 0..40 {
                let mut want = 0.0;
                for k in 0..4 {
                    if t >= 3 * k {
                        want += w.data()[c * 4 + k] * x.data()[(b * 3 + c) * 40 + t - 3 * k];
                    }
                }
                assert!((y.data()[(b * 3 + c) * 40 + t] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_is_causal() {
    let x = randn(&[1, 2, 30], 3);
    let w = randn(&[2, 5], 4);
    let y = conv1d_dilated(&x, &w, 2, true).unwrap();
    for p in [0usize, 7, 29] {
        let mut x2 = x.clone();
        x2.data_mut()[p] += 3.0;
        x2.data_mut()[30 + p] -= 1.5;
        let y2 = conv1d_dilated(&x2, &w, 2, true).unwrap();
        for c in 0..2 {
            for t in 0..p {
                assert_eq!(y.data()[c * 30 + t], y2.data()[c * 30 + t]);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let s = softmax_rows(&t1(&[0.0, 0.0])).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&t1(&[f64::NEG_INFINITY, 0.0])).unwrap();
    assert_eq!(s.data(), &[0.0, 1.0]);
    let s = softmax_rows(&t1(&[1.0, 2.0, 3.0])).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (a, b) in s
        .data()
        .iter()
        .zip([1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z])
    {
        assert!((a - b).abs() < 1e-12);
    }
    let s = softmax_rows(&t1(&[f64::NEG_INFINITY; 3])).unwrap();
    assert_eq!(s.data(), &[0.0; 3]);
    assert!(softmax_rows(&t1(&[f64::NAN, 0.0])).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..20),
        shift in -50.0f64..50.0,
    ) {
        let a = softmax_rows(&t1(&row)).unwrap();
        prop_assert!((a.sum() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = softmax_rows(&t1(&shifted)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn fft_agrees_with_direct(
        x in prop::collection::vec(-2.0f64..2.0, 1..80),
        k in prop::collection::vec(-2.0f64..2.0, 1..40),
    ) {
        let y = fft_circular_convolve(&t1(&x), &t1(&k)).unwrap();
        let want = direct_causal_conv(&x, &k);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_output_length_preserved(len in 1usize..50, taps in 1usize..6, d in 1usize..8) {
        let x = randn(&[1, 2, len], len as u64);
        let w = randn(&[2, taps], taps as u64);
        let y = conv1d_dilated(&x, &w, d, true).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}

fn check(name: &str, tol: f64, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let r = gradcheck_many(
        |tape: &mut Tape<f64>, v: &[Var]| Ok(f(tape, v)),
        inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < tol, "{name}: {r:?}");
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = tape.constant(randn(tape.shape(y), seed));
    let p = tape.mul(y, w);
    tape.sum(p)
}

#[test]
fn gradcheck_smooth_ops() {
    check(
        "add",
        1e-5,
        &[randn(&[3, 4], 1), randn(&[3, 4], 2)],
        |t, v| {
            let y = t.add(v[0], v[1]);
            weighted_sum(t, y, 9)
        },
    );
    check(
        "mul",
        1e-5,
        &[randn(&[3, 4], 1), randn(&[3, 4], 2)],
        |t, v| {
            let y = t.mul(v[0], v[1]);
            weighted_sum(t, y, 9)
        },
    );
    check(
        "matmul",
        1e-5,
        &[randn(&[2, 3, 4], 1), randn(&[4, 5], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_sum(t, y, 9)
        },
    );
    check(
        "linear",
        1e-5,
        &[randn(&[3, 4], 1), randn(&[4, 2], 2), randn(&[2], 3)],
        |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            weighted_sum(t, y, 9)
        },
    );
    check("sigmoid", 1e-5, &[randn(&[10], 1)], |t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, 9)
    });
    check("silu", 1e-5, &[randn(&[10], 1)], |t, v| {
        let y = t.silu(v[0]);
        weighted_sum(t, y, 9)
    });
    check(
        "gate_mix",
        1e-5,
        &[randn(&[6], 1), randn(&[6], 2), randn(&[6], 3)],
        |t, v| {
            let g = t.sigmoid(v[0]);
            let y = t.gate_mix(g, v[1], v[2]);
            weighted_sum(t, y, 9)
        },
    );
    check(
        "mul_diag",
        1e-5,
        &[randn(&[2, 3, 4], 1), randn(&[4], 2), randn(&[4], 3)],
        |t, v| {
            let y = t.mul_diag(v[0], v[1]);
            let y = t.add_bias(y, v[2]);
            weighted_sum(t, y, 9)
        },
    );
    check("transpose", 1e-5, &[randn(&[2, 3, 4], 1)], |t, v| {
        let y = t.transpose_last2(v[0]);
        weighted_sum(t, y, 9)
    });
    check("softmax", 1e-5, &[randn(&[3, 5], 1)], |t, v| {
        let y = t.softmax_rows(v[0]);
        weighted_sum(t, y, 9)
    });
    check(
        "conv1d_dilated",
        1e-5,
        &[randn(&[2, 3, 12], 1), randn(&[3, 4], 2)],
        |t, v| {
            let y = t
                .conv1d_dilated(v[0], v[1], 2, true, ConvLayout::ChannelsFirst)
                .unwrap();
            weighted_sum(t, y, 9)
        },
    );
    check(
        "conv1d_dilated channels-last",
        1e-5,
        &[randn(&[2, 12, 3], 1), randn(&[3, 4], 2)],
        |t, v| {
            let y = t
                .conv1d_dilated(v[0], v[1], 3, true, ConvLayout::ChannelsLast)
                .unwrap();
            weighted_sum(t, y, 9)
        },
    );
    check(
        "fft_convolve",
        1e-5,
        &[randn(&[2, 4, 9], 1), randn(&[2, 6], 2)],
        |t, v| {
            let y = t.fft_convolve(v[0], v[1]).unwrap();
            weighted_sum(t, y, 9)
        },
    );
    check(
        "fft_convolve long kernel",
        1e-5,
        &[randn(&[1, 1, 5], 1), randn(&[1, 11], 2)],
        |t, v| {
            let y = t.fft_convolve(v[0], v[1]).unwrap();
            weighted_sum(t, y, 9)
        },
    );
}

#[test]
fn gradcheck_normalizing_ops() {
    check(
        "layer_norm",
        1e-4,
        &[randn(&[3, 5], 1), randn(&[5], 2), randn(&[5], 3)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            weighted_sum(t, y, 9)
        },
    );
    check("dropout", 1e-4, &[randn(&[4, 6], 1)], |t, v| {
        let y = t.dropout(v[0], 0.3, true, &mut rng(77));
        weighted_sum(t, y, 9)
    });
    check("embedding", 1e-4, &[randn(&[6, 3], 1)], |t, v| {
        let y = t.embedding(v[0], &[1, 4, 1, 5, 0, 0], &[2, 3]).unwrap();
        weighted_sum(t, y, 9)
    });
    check("cross_entropy", 1e-4, &[randn(&[4, 5], 1)], |t, v| {
        t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()
    });
    check("mean", 1e-4, &[randn(&[7], 1)], |t, v| t.mean(v[0]));
    check("take_step", 1e-4, &[randn(&[2, 5, 3], 1)], |t, v| {
        let y = t.take_step(v[0], 3);
        weighted_sum(t, y, 9)
    });
}

#[test]
fn dropout_eval_is_identity_and_train_scales() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1000]));
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng(0)), x);
    let y = tape.dropout(x, 0.5, true, &mut rng(0));
    let v = tape.value(y);
    assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
    let kept = v.data().iter().filter(|&&e| e == 2.0).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn gradcheck_reports_sum_of_squares_exactly() {
    let r = gradcheck(
        |t, x| {
            let s = t.mul(x, x);
            Ok(t.sum(s))
        },
        &randn(&[6], 3),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn non_finite_gradient_names_node() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let out = tape.value(x).clone();
    let y = tape.record("log_like", &[x], out, |ctx| {
        vec![Some(ctx.inputs[0].map(|v| 1.0 / v))]
    });
    let s = tape.sum(y);
    match tape.backward(s) {
        Err(seqop_core::Error::NonFiniteGradient { node, op }) => {
            assert_eq!(node, y.index());
            assert_eq!(op, "log_like");
        }
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
}
