mod common;

use common::{gradcheck, random_tensor};
use tas_core::rng::SplitMix64;
use tas_core::tensor::{adam_step, AdamConfig, AdamState, ParamStore};
use tas_core::{Error, Tape, Tensor};

const GRAD_TOL: f64 = 1e-6;

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_annihilation() {
    let mut tape = Tape::new();
    let eye = tape.leaf(Tensor::<f64>::eye(2));
    let m = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = tape.leaf(Tensor::zeros(&[2, 3]));
    let out = tape.matmul(eye, z).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[2, 3]));
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_symmetry_and_overflow() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t2(&[&[0.0, 0.0], &[1000.0, 0.0]]));
    let y = tape.softmax_lastdim(x).unwrap();
    let y = tape.value(y);
    assert_eq!(y.row(0), &[0.5, 0.5]);
    assert!(y.is_finite());
    assert!((y.at(1, 0) - 1.0).abs() < 1e-12 && y.at(1, 1) < 1e-300);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = SplitMix64::new(5);
    for n in 1..8 {
        let x = random_tensor(&[3, n], &mut rng);
        let shifted = x.map(|v| v + 17.25);
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let ya = tape.softmax_lastdim(a).unwrap();
        let yb = tape.softmax_lastdim(b).unwrap();
        for r in 0..3 {
            let s: f64 = tape.value(ya).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) <= 1e-6);
    }
}

#[test]
fn softmax_nan_propagates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t2(&[&[f64::NAN, 0.0]]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.is_nan()));
}

#[test]
fn conv_identity_kernel_and_stride_shape() {
    let mut rng = SplitMix64::new(1);
    let x = random_tensor(&[6, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(Tensor::new(&[1, 3, 3], Tensor::<f64>::eye(3).into_data()).unwrap());
    let b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.conv1d_dilated(xv, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y), &x);

    let x8 = tape.leaf(Tensor::zeros(&[8, 2]));
    let w3 = tape.leaf(Tensor::zeros(&[3, 2, 4]));
    let b4 = tape.leaf(Tensor::zeros(&[4]));
    let y = tape.conv1d_dilated(x8, w3, b4, 1, 4).unwrap();
    assert_eq!(tape.shape(y), &[2, 4]);
}

#[test]
fn conv_even_kernel_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[4, 1]));
    let w = tape.leaf(Tensor::zeros(&[2, 1, 1]));
    let b = tape.leaf(Tensor::zeros(&[1]));
    assert!(matches!(
        tape.conv1d_dilated(x, w, b, 1, 1),
        Err(Error::Config(_))
    ));
}

/// Direct nested-loop convolution used as an independent reference.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], dil: usize, stride: usize) -> Vec<f64> {
    let (t, ci) = (x.shape()[0], x.shape()[1]);
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let t_out = t.div_ceil(stride);
    let mut out = vec![0.0; t_out * co];
    for j in 0..t_out {
        for o in 0..co {
            let mut s = b[o];
            for tap in 0..k {
                let pos = (j * stride) as i64 + (tap as i64 - (k / 2) as i64) * dil as i64;
                if pos < 0 || pos >= t as i64 {
                    continue;
                }
                for c in 0..ci {
                    s += x.data()[pos as usize * ci + c] * w.data()[(tap * ci + c) * co + o];
                }
            }
            out[j * co + o] = s;
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = SplitMix64::new(2);
    for (t, dil, stride) in [(11, 2, 1), (9, 1, 3), (20, 4, 1), (17, 2, 4)] {
        let x = random_tensor(&[t, 3], &mut rng);
        let w = random_tensor(&[3, 3, 5], &mut rng);
        let b = random_tensor(&[5], &mut rng);
        let expect = naive_conv(&x, &w, b.data(), dil, stride);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = tape.conv1d_dilated(xv, wv, bv, dil, stride).unwrap();
        let got = tape.value(y).data();
        let err = got
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-5, "t={t} dil={dil} err={err}");
    }
}

#[test]
fn conv_stride_one_preserves_length() {
    for t in 1..30 {
        for k in [1, 3, 5, 7] {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::zeros(&[t, 2]));
            let w = tape.leaf(Tensor::zeros(&[k, 2, 2]));
            let b = tape.leaf(Tensor::zeros(&[2]));
            let y = tape.conv1d_dilated(x, w, b, 3, 1).unwrap();
            assert_eq!(tape.shape(y)[0], t);
        }
    }
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.avg_pool1d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 3.5]);

    let c = tape.leaf(Tensor::filled(&[7, 2], 3.0));
    let y = tape.avg_pool1d(c, 3, 3).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

    let x5 = tape.leaf(Tensor::new(&[5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = tape.avg_pool1d(x5, 3, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.5]);
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[2, 1], vec![10.0, 20.0]).unwrap());
    let y = tape.nn_upsample1d(x, 4).unwrap();
    assert_eq!(tape.value(y).data(), &[10.0, 10.0, 20.0, 20.0]);
    let y = tape.nn_upsample1d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[10.0, 20.0]);

    let x3 = tape.leaf(Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]).unwrap());
    let y = tape.nn_upsample1d(x3, 7).unwrap();
    let expect: Vec<f64> = (0..7).map(|t| ((t * 3) / 7) as f64).collect();
    assert_eq!(expect, vec![0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    assert_eq!(tape.value(y).data(), expect.as_slice());

    assert!(tape.nn_upsample1d(x3, 2).is_err());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[3, 4]));
    let targets = t2(&[
        &[1.0, 0.0, 0.0, 0.0],
        &[0.25, 0.25, 0.25, 0.25],
        &[0.0, 0.5, 0.5, 0.0],
    ]);
    let loss = tape.cross_entropy_soft(logits, &targets).unwrap();
    assert!((tape.value(loss).data()[0] - 3.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_unnormalized_targets() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[1, 2]));
    let bad = t2(&[&[0.7, 0.7]]);
    assert!(tape.cross_entropy_soft(logits, &bad).is_err());
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::filled(&[2, 5], 4.0));
    let g = tape.leaf(Tensor::filled(&[5], 1.0));
    let b = tape.leaf(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::filled(&[2, 2], 1.0));
    let b = store.add("b", Tensor::filled(&[2, 2], 2.0));
    store.set_frozen(a, true);
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
    let y = tape.matmul(av, bv).unwrap();
    let targets = Tensor::filled(&[2, 2], 0.5);
    let loss = tape.cross_entropy_soft(y, &targets).unwrap();
    tape.backward(loss).unwrap();
    store.accumulate(&tape);
    assert!(store.grad(a).is_none());
    assert!(store.grad(b).is_some());
    let before = store.value(a).clone();
    adam_step(&mut store, &mut AdamState::new(), &AdamConfig::default()).unwrap();
    assert_eq!(store.value(a), &before);
}

#[test]
#[should_panic(expected = "frozen")]
fn updating_frozen_parameter_with_gradient_panics() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::filled(&[1], 1.0));
    store.value_mut(a).grad = Some(vec![1.0]);
    store.set_frozen(a, true);
    let _ = adam_step(&mut store, &mut AdamState::new(), &AdamConfig::default());
}

#[test]
fn adam_rejects_empty_store_and_descends() {
    let mut empty = ParamStore::<f64>::new();
    assert!(adam_step(&mut empty, &mut AdamState::new(), &AdamConfig::default()).is_err());

    // minimize cross-entropy of a single logit row toward class 0
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::zeros(&[1, 3]));
    let mut state = AdamState::new();
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let target = t2(&[&[1.0, 0.0, 0.0]]);
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.param(&store, w);
        let loss = tape.cross_entropy_soft(x, &target).unwrap();
        let l = tape.value(loss).data()[0];
        assert!(l < last);
        last = l;
        tape.backward(loss).unwrap();
        store.accumulate(&tape);
        adam_step(&mut store, &mut state, &cfg).unwrap();
    }
}

#[test]
fn window_attention_even_window_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[4, 2]));
    assert!(matches!(
        tape.window_attention(x, x, x, 4, 1),
        Err(Error::Config(_))
    ));
}

// ---- finite-difference gradient checks (f64) ----

fn check(name: &str, worst: f64) {
    assert!(worst <= GRAD_TOL, "{name}: rel err {worst:e}");
}

#[test]
fn grad_matmul() {
    let mut rng = SplitMix64::new(10);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    check(
        "matmul",
        gradcheck(&[a, b], &mut rng, |t, v| t.matmul(v[0], v[1]).unwrap()),
    );
}

#[test]
fn grad_softmax() {
    let mut rng = SplitMix64::new(11);
    let x = random_tensor(&[1, 5], &mut rng);
    check(
        "softmax",
        gradcheck(&[x], &mut rng, |t, v| t.softmax_lastdim(v[0]).unwrap()),
    );
    let x = random_tensor(&[3, 5], &mut rng);
    let mask = [false, true, false, false, true];
    check(
        "softmax_masked",
        gradcheck(&[x], &mut rng, |t, v| {
            t.softmax_masked(v[0], Some(&mask)).unwrap()
        }),
    );
}

#[test]
fn grad_elementwise_and_structural() {
    let mut rng = SplitMix64::new(12);
    let a = random_tensor(&[4, 3], &mut rng);
    let b = random_tensor(&[4, 3], &mut rng);
    let bias = random_tensor(&[3], &mut rng);
    check(
        "add",
        gradcheck(&[a.clone(), b.clone()], &mut rng, |t, v| {
            t.add(v[0], v[1]).unwrap()
        }),
    );
    check(
        "scale",
        gradcheck(std::slice::from_ref(&a), &mut rng, |t, v| {
            t.scale(v[0], -1.7)
        }),
    );
    check(
        "gelu",
        gradcheck(std::slice::from_ref(&a), &mut rng, |t, v| t.gelu(v[0])),
    );
    check(
        "add_row_bias",
        gradcheck(&[a.clone(), bias], &mut rng, |t, v| {
            t.add_row_bias(v[0], v[1]).unwrap()
        }),
    );
    check(
        "transpose",
        gradcheck(std::slice::from_ref(&a), &mut rng, |t, v| {
            t.transpose(v[0]).unwrap()
        }),
    );
    check(
        "concat",
        gradcheck(&[a.clone(), b], &mut rng, |t, v| {
            t.concat_channel(&[v[0], v[1]]).unwrap()
        }),
    );
    check(
        "slice_cols",
        gradcheck(std::slice::from_ref(&a), &mut rng, |t, v| {
            t.slice_cols(v[0], 1, 2).unwrap()
        }),
    );
    check(
        "slice_rows",
        gradcheck(std::slice::from_ref(&a), &mut rng, |t, v| {
            t.slice_rows(v[0], 1, 2).unwrap()
        }),
    );
    let table = random_tensor(&[5, 3], &mut rng);
    check(
        "embedding",
        gradcheck(&[table], &mut rng, |t, v| {
            t.embedding(v[0], &[4, 0, 4, 2]).unwrap()
        }),
    );
}

#[test]
fn grad_layer_norm() {
    let mut rng = SplitMix64::new(13);
    let x = random_tensor(&[3, 6], &mut rng);
    let g = random_tensor(&[6], &mut rng);
    let b = random_tensor(&[6], &mut rng);
    check(
        "layer_norm",
        gradcheck(&[x, g, b], &mut rng, |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        }),
    );
}

#[test]
fn grad_conv_pool_upsample() {
    let mut rng = SplitMix64::new(14);
    let x = random_tensor(&[9, 2], &mut rng);
    let w = random_tensor(&[3, 2, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    check(
        "conv1d",
        gradcheck(&[x.clone(), w.clone(), b.clone()], &mut rng, |t, v| {
            t.conv1d_dilated(v[0], v[1], v[2], 2, 1).unwrap()
        }),
    );
    check(
        "conv1d_strided",
        gradcheck(&[x.clone(), w, b], &mut rng, |t, v| {
            t.conv1d_dilated(v[0], v[1], v[2], 1, 4).unwrap()
        }),
    );
    check(
        "avg_pool",
        gradcheck(std::slice::from_ref(&x), &mut rng, |t, v| {
            t.avg_pool1d(v[0], 4, 3).unwrap()
        }),
    );
    check(
        "upsample",
        gradcheck(&[x], &mut rng, |t, v| t.nn_upsample1d(v[0], 20).unwrap()),
    );
}

#[test]
fn grad_cross_entropy() {
    let mut rng = SplitMix64::new(15);
    let logits = random_tensor(&[4, 3], &mut rng);
    let mut targets = Tensor::zeros(&[4, 3]);
    for r in 0..4 {
        let raw: Vec<f64> = (0..3).map(|_| rng.next_f64() + 0.1).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..3 {
            targets.data_mut()[r * 3 + c] = raw[c] / s;
        }
    }
    check(
        "cross_entropy_soft",
        gradcheck(&[logits], &mut rng, |t, v| {
            t.cross_entropy_soft(v[0], &targets).unwrap()
        }),
    );
}

#[test]
fn grad_window_attention() {
    let mut rng = SplitMix64::new(16);
    for (len, w, r) in [(9, 3, 1), (12, 5, 2), (7, 7, 4)] {
        let q = random_tensor(&[len, 4], &mut rng);
        let k = random_tensor(&[len, 4], &mut rng);
        let v = random_tensor(&[len, 4], &mut rng);
        check(
            "window_attention",
            gradcheck(&[q, k, v], &mut rng, |t, x| {
                t.window_attention(x[0], x[1], x[2], w, r).unwrap()
            }),
        );
    }
}
