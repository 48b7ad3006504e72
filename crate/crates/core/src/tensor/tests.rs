use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tape_with<F: FnOnce(&mut Tape) -> Result<Var>>(f: F) -> (Tape, Var) {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    (tape, v)
}

#[test]
fn matmul_identity_is_noop() {
    let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let (tape, out) = tape_with(|t| {
        let i = t.constant(Tensor::eye(2))?;
        let m = t.constant(m.clone())?;
        t.matmul(i, m)
    });
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_case() {
    let (tape, out) = tape_with(|t| {
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]))?;
        let b = t.constant(Tensor::from_rows(&[&[5.0], &[6.0]]))?;
        t.matmul(a, b)
    });
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradients_match_hand_formulas() {
    // loss = sum(a @ b); da = ones @ b^T, db = a^T @ ones
    let mut a = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
    let mut tape = Tape::new();
    let va = tape.leaf(&a).unwrap();
    let b = tape
        .constant(Tensor::from_rows(&[&[2.0, 0.0], &[1.0, -1.0]]))
        .unwrap();
    let prod = tape.matmul(va, b).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    // row sums of b^T: [2+0, 1-1] = [2, 0]
    assert_eq!(grads.wrt(va).unwrap().data(), &[2.0, 0.0, 2.0, 0.0]);

    let err = grad_check(
        |t, vars| {
            let b = t.constant(Tensor::from_rows(&[&[2.0, 0.0], &[1.0, -1.0]]))?;
            let p = t.matmul(vars[0], b)?;
            t.sum_all(p)
        },
        std::slice::from_mut(&mut a),
        grad_check::DEFAULT_H,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn affine_zero_input_zero_bias_is_zero() {
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::zeros(vec![4, 3]))?;
        let w = t.constant(Tensor::ones(vec![3, 2]))?;
        let b = t.constant(Tensor::zeros(vec![2]))?;
        t.affine(x, w, b)
    });
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn affine_hand_case() {
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::from_rows(&[&[1.0, 1.0]]))?;
        let w = t.constant(Tensor::eye(2))?;
        let b = t.constant(Tensor::new(vec![2], vec![2.0, 3.0])?)?;
        t.affine(x, w, b)
    });
    assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
}

#[test]
fn affine_bias_gradient_sums_over_leading_dims() {
    // With loss = sum(affine(x, w, b)), db = row count.
    let mut b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
    let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let mut tape = Tape::new();
    let vb = tape.leaf(&b).unwrap();
    let vx = tape.constant(x.clone()).unwrap();
    let w = tape.constant(Tensor::eye(2)).unwrap();
    let out = tape.affine(vx, w, vb).unwrap();
    let loss = tape.sum_all(out).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(vb).unwrap().data(), &[3.0, 3.0]);

    let err = grad_check(
        |t, vars| {
            let vx = t.constant(x.clone())?;
            let w = t.constant(Tensor::eye(2))?;
            let out = t.affine(vx, w, vars[0])?;
            t.sum_all(out)
        },
        std::slice::from_mut(&mut b),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn relu_clamps_negatives() {
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0])?)?;
        t.relu(x)
    });
    assert_eq!(tape.value(out).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_symmetry_and_normalization() {
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0])?)?;
        t.softmax_last(x)
    });
    assert_eq!(tape.value(out).data(), &[0.5, 0.5]);

    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0])?)?;
        t.softmax_last(x)
    });
    let sum: f64 = tape.value(out).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert!(tape.value(out).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn batch_norm_constant_input_is_zero() {
    let mut running = RunningStats::new(3);
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::full(vec![4, 3], 5.0))?;
        let g = t.constant(Tensor::ones(vec![3]))?;
        let b = t.constant(Tensor::zeros(vec![3]))?;
        t.batch_norm(x, g, b, &mut running, 0.1, 1e-5, Mode::Train)
    });
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_two_point_column() {
    // mean 2, biased variance 1 -> normalized to about -1, 1
    let mut running = RunningStats::new(1);
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0])?)?;
        let g = t.constant(Tensor::ones(vec![1]))?;
        let b = t.constant(Tensor::zeros(vec![1]))?;
        t.batch_norm(x, g, b, &mut running, 0.1, 1e-5, Mode::Train)
    });
    let v = tape.value(out).data();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4, "{v:?}");
}

#[test]
fn batch_norm_eval_with_stored_stats_matches_train() {
    let x = Tensor::from_rows(&[&[1.0, -4.0], &[3.0, 2.0], &[8.0, 0.5]]);
    let gamma = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
    let beta = Tensor::new(vec![2], vec![0.2, -0.1]).unwrap();

    let mut running = RunningStats::new(2);
    let (tape, out) = tape_with(|t| {
        let vx = t.constant(x.clone())?;
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        t.batch_norm(vx, g, b, &mut running, 0.1, 1e-5, Mode::Train)
    });
    let train_out = tape.value(out).clone();

    // Store the batch statistics directly, then eval-mode must reproduce the
    // training-time normalization on the same batch.
    let mean: Vec<f64> = (0..2)
        .map(|c| (0..3).map(|r| x.at2(r, c)).sum::<f64>() / 3.0)
        .collect();
    let var: Vec<f64> = (0..2)
        .map(|c| {
            (0..3)
                .map(|r| (x.at2(r, c) - mean[c]).powi(2))
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let mut stored = RunningStats { mean, var };
    let (tape, out) = tape_with(|t| {
        let vx = t.constant(x.clone())?;
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        t.batch_norm(vx, g, b, &mut stored, 0.1, 1e-5, Mode::Eval)
    });
    assert_eq!(tape.value(out).data(), train_out.data());
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = vec![
        Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        Tensor::new(vec![3], vec![1.2, 0.8, -0.5]).unwrap(),
        Tensor::new(vec![3], vec![0.1, -0.3, 0.0]).unwrap(),
    ];
    let err = grad_check(
        |t, vars| {
            let mut running = RunningStats::new(3);
            let y = t.batch_norm(vars[0], vars[1], vars[2], &mut running, 0.1, 1e-5, Mode::Train)?;
            let sq = t.hadamard(y, y)?;
            t.sum_all(sq)
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn dropout_p_zero_and_eval_are_identity() {
    let x = Tensor::new(vec![8], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tape, out) = tape_with(|t| {
        let vx = t.constant(x.clone())?;
        t.dropout(vx, 0.0, Mode::Train, &mut rng)
    });
    assert_eq!(tape.value(out).data(), x.data());

    let (tape, out) = tape_with(|t| {
        let vx = t.constant(x.clone())?;
        t.dropout(vx, 0.9, Mode::Eval, &mut rng)
    });
    assert_eq!(tape.value(out).data(), x.data());
}

#[test]
fn dropout_preserves_expectation() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::full(vec![n], 1.0);
    let (tape, out) = tape_with(|t| {
        let vx = t.constant(x.clone())?;
        t.dropout(vx, 0.3, Mode::Train, &mut rng)
    });
    let mean: f64 = tape.value(out).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn dropout_rejects_bad_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2])).unwrap();
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    assert!(tape.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
}

#[test]
fn cross_entropy_uniform_is_ln2() {
    let (tape, out) = tape_with(|t| {
        let logits = t.constant(Tensor::zeros(vec![2, 2]))?;
        t.cross_entropy(logits, &[0, 1])
    });
    assert!((tape.value(out).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_approaches_zero() {
    let (tape, out) = tape_with(|t| {
        let logits = t.constant(Tensor::from_rows(&[&[20.0, -20.0]]))?;
        t.cross_entropy(logits, &[0])
    });
    assert!(tape.value(out).data()[0] < 1e-6);
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(vec![1, 2])).unwrap();
    assert!(matches!(
        tape.cross_entropy(logits, &[2]),
        Err(TensorError::InvalidLabel { label: 2, classes: 2 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut logits = vec![Tensor::new(
        vec![4, 2],
        (0..8).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()];
    let err = grad_check(
        |t, vars| t.cross_entropy(vars[0], &[0, 1, 1, 0]),
        &mut logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_square_at_three_gives_six() {
    let w = Tensor::scalar(3.0);
    let mut tape = Tape::new();
    let vw = tape.leaf(&w).unwrap();
    let sq = tape.hadamard(vw, vw).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(vw).unwrap().data(), &[6.0]);
}

#[test]
fn backward_twice_errors() {
    let w = Tensor::scalar(2.0);
    let mut tape = Tape::new();
    let vw = tape.leaf(&w).unwrap();
    let loss = tape.sum_all(vw).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(
        tape.backward(loss),
        Err(TensorError::TapeConsumed)
    ));
    // Recording new ops on a consumed tape is also an error.
    assert!(matches!(
        tape.constant(Tensor::scalar(0.0)),
        Err(TensorError::TapeConsumed)
    ));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2, 2])).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn non_finite_forward_is_surfaced() {
    let mut tape = Tape::new();
    let a = tape
        .constant(Tensor::new(vec![1, 1], vec![1e308]).unwrap())
        .unwrap();
    let b = tape
        .constant(Tensor::new(vec![1, 1], vec![1e308]).unwrap())
        .unwrap();
    assert!(matches!(
        tape.add(a, b),
        Err(TensorError::NonFinite { .. })
    ));
    assert!(tape
        .constant(Tensor::new(vec![1], vec![f64::NAN]).unwrap())
        .is_err());
}

#[test]
fn composite_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut params = vec![
        Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(),
        Tensor::new(vec![4], vec![1.0, 0.9, 1.1, 1.0]).unwrap(),
        Tensor::new(vec![4], vec![0.0, 0.1, -0.1, 0.05]).unwrap(),
    ];
    let err = grad_check(
        |t, vars| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
            let ln = t.layer_norm(vars[0], vars[3], vars[4], 1e-5)?;
            let act = t.relu(ln)?;
            let dropped = t.dropout(act, 0.25, Mode::Train, &mut drop_rng)?;
            let logits = t.affine(dropped, vars[1], vars[2])?;
            t.cross_entropy(logits, &[0, 1, 0])
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn bmm_and_swap_axes_match_reference() {
    // Two stacked 2x2 products checked by hand.
    let (tape, out) = tape_with(|t| {
        let a = t.constant(Tensor::new(
            vec![2, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0],
        )?)?;
        let b = t.constant(Tensor::new(
            vec![2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
        )?)?;
        t.bmm(a, b)
    });
    assert_eq!(
        tape.value(out).data(),
        &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]
    );

    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?)?;
        t.transpose_last2(x)
    });
    assert_eq!(tape.value(out).shape(), &[3, 2]);
    assert_eq!(tape.value(out).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

    // swap middle axes of a rank-4 tensor, checked against a naive index map
    let shape = [2usize, 3, 4, 5];
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let (tape, out) = tape_with(|t| {
        let x = t.constant(Tensor::new(shape.to_vec(), data.clone())?)?;
        t.swap_axes(x, 1, 2)
    });
    let got = tape.value(out);
    assert_eq!(got.shape(), &[2, 4, 3, 5]);
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                for d in 0..5 {
                    let src = ((a * 3 + b) * 4 + c) * 5 + d;
                    let dst = ((a * 4 + c) * 3 + b) * 5 + d;
                    assert_eq!(got.data()[dst], data[src]);
                }
            }
        }
    }
}

#[test]
fn matmul_bcast_left_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = vec![
        Tensor::new(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(
            vec![2, 3, 2],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap(),
    ];
    let err = grad_check(
        |t, vars| {
            let p = t.matmul_bcast_left(vars[0], vars[1])?;
            let sq = t.hadamard(p, p)?;
            t.sum_all(sq)
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn concat_last_roundtrip_gradients() {
    let mut params = vec![
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        Tensor::new(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap(),
    ];
    let err = grad_check(
        |t, vars| {
            let c = t.concat_last(&[vars[0], vars[1]])?;
            let sq = t.hadamard(c, c)?;
            t.sum_all(sq)
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn deterministic_ops_are_bitwise_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::new(vec![16, 16], (0..256).map(|_| rng.random_range(-3.0..3.0)).collect())
        .unwrap();
    let w = Tensor::new(vec![16, 16], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let run = || {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone()).unwrap();
        let vw = tape.constant(w.clone()).unwrap();
        let p = tape.matmul(vx, vw).unwrap();
        let r = tape.relu(p).unwrap();
        tape.value(r).clone()
    };
    assert_eq!(run().data(), run().data());
}
