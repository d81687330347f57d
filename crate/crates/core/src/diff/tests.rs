use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn vec_leaf(g: &mut Graph, v: &[f64]) -> NodeId {
    g.variable(Tensor::vector(v.to_vec()))
}

#[test]
fn sum_of_squares_forward_and_gradient() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let sq = g.square(x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    assert_eq!(g.forward_scalar(loss).unwrap(), 5.0);
    let bw = g.backward(loss).unwrap();
    assert_eq!(bw.node(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = vec_leaf(&mut g, &[0.0, 0.0]);
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.forward(s).unwrap(), &[0.5, 0.5]);
}

#[test]
fn pearson_hand_value() {
    // x = [1,2,3], y = [1,3,2]: cov = 1, var_x = var_y = 2 (sums of squares)
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.constant(Tensor::vector(vec![1.0, 3.0, 2.0]));
    let r = g.pearson_corr(x, y, 0).unwrap();
    assert!((g.forward_scalar(r).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn mean_gradient_is_uniform() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = vec_leaf(&mut g, &[1.0, -2.0, 3.0, 0.5]);
    let m = g.mean(x, 0).unwrap();
    g.forward(m).unwrap();
    let bw = g.backward(m).unwrap();
    assert_eq!(bw.node(x).unwrap(), &[0.25; 4]);
}

#[test]
fn pearson_at_its_maximum_has_zero_gradient() {
    let mut g = Graph::new(Mode::Eval, 0);
    let v = [0.3, -1.2, 2.5, 0.7, 1.1];
    let x = vec_leaf(&mut g, &v);
    let y = g.constant(Tensor::vector(v.to_vec()));
    let r = g.pearson_corr(x, y, 0).unwrap();
    assert!((g.forward_scalar(r).unwrap() - 1.0).abs() < 1e-12);
    let bw = g.backward(r).unwrap();
    assert!(bw.node(x).unwrap().iter().all(|d| d.abs() < 1e-10));
}

#[test]
fn backward_requires_forward_and_scalar_loss() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = vec_leaf(&mut g, &[1.0, 2.0]);
    let s = g.sum_all(x).unwrap();
    assert!(matches!(g.backward(s), Err(DiffError::NotEvaluated)));
    g.forward(x).unwrap();
    assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new(Mode::Eval, 0);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, c), Err(DiffError::Shape { op: "add", .. })));
}

#[test]
fn non_finite_output_reports_first_offending_node() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let l = g.log(x).unwrap();
    let s = g.sum_all(l).unwrap();
    match g.forward(s) {
        Err(DiffError::NonFinite { node, op }) => {
            assert_eq!(node, l.index());
            assert_eq!(op, "log");
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn forward_is_pure() {
    let build = || {
        let mut g = Graph::new(Mode::Eval, 3);
        let x = g.constant(Tensor::vector(vec![0.1, 0.7, -0.4]));
        let t = g.tanh(x).unwrap();
        let s = g.softmax(t, 0).unwrap();
        let l = g.sum_all(s).unwrap();
        (g, x, l)
    };
    let (mut a, xa, la) = build();
    let (mut b, _, lb) = build();
    assert_eq!(a.forward(la).unwrap().to_vec(), b.forward(lb).unwrap().to_vec());
    // re-evaluation after resetting a leaf reproduces the same bits
    let first = a.tensor(la).unwrap();
    a.set_leaf(xa, Tensor::vector(vec![0.1, 0.7, -0.4])).unwrap();
    a.forward(la).unwrap();
    assert_eq!(a.tensor(la).unwrap(), first);
}

#[test]
fn dropout_masks_are_seeded_and_eval_is_identity() {
    let mask_of = |seed| {
        let mut g = Graph::new(Mode::Train, seed);
        let x = g.constant(Tensor::filled(&[64], 1.0));
        let d = g.dropout(x, 0.5).unwrap();
        g.forward(d).unwrap().to_vec()
    };
    assert_eq!(mask_of(9), mask_of(9));
    assert_ne!(mask_of(9), mask_of(10));
    assert!(mask_of(9).iter().all(|&v| v == 0.0 || v == 2.0));

    let mut g = Graph::new(Mode::Eval, 9);
    let x = g.constant(Tensor::filled(&[8], 1.0));
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);
}

#[test]
fn softmax_sums_to_one_and_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-20.0..20.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::vector(v.clone()));
        let xs = g.offset(x, c).unwrap();
        let s1 = g.softmax(x, 0).unwrap();
        let s2 = g.softmax(xs, 0).unwrap();
        let a = g.forward(s1).unwrap().to_vec();
        let b = g.forward(s2).unwrap().to_vec();
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn clip_outside_bounds_passes_grad_check() {
    let mut params = ParamStore::new(0);
    params.insert("x", Tensor::vector(vec![5.0, -4.0, 0.3])).unwrap();
    let report = grad_check::<_, DiffError>(
        |p| {
            let mut g = Graph::new(Mode::Eval, 0);
            let x = g.param(p, "x")?;
            let c = g.clip(x, -1.0, 1.0)?;
            let l = g.sum_all(c)?;
            Ok((g, l))
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn quadratic_grad_check_is_tight() {
    let mut params = ParamStore::new(1);
    params.init_uniform("w", &[4, 3], 2).unwrap();
    let report = grad_check::<_, DiffError>(
        |p| {
            let mut g = Graph::new(Mode::Eval, 0);
            let w = g.param(p, "w")?;
            let sq = g.square(w)?;
            let l = g.sum_all(sq)?;
            Ok((g, l))
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.max_rel_err() < 1e-9, "{}", report.max_rel_err());
    let json = serde_json::to_string(&report).unwrap();
    let back: GradReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn nondeterministic_builder_is_rejected() {
    let params = {
        let mut p = ParamStore::new(0);
        p.init_constant("x", &[2], 1.0).unwrap();
        p
    };
    let calls = std::cell::Cell::new(0u64);
    let res = grad_check::<_, DiffError>(
        |p| {
            calls.set(calls.get() + 1);
            let mut g = Graph::new(Mode::Train, 0);
            let x = g.param(p, "x")?;
            let l = g.sum_all(x)?;
            let l = g.offset(l, calls.get() as f64)?;
            Ok((g, l))
        },
        &params,
        GradCheckOptions::default(),
    );
    assert!(matches!(res, Err(DiffError::NonDeterministic { .. })));
}

#[test]
fn unreached_parameters_get_zero_gradients() {
    let mut params = ParamStore::new(0);
    params.init_constant("used", &[2], 1.0).unwrap();
    params.init_constant("unused", &[3], 1.0).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(&params, "used").unwrap();
    let l = g.sum_all(x).unwrap();
    g.forward(l).unwrap();
    let grads = g.grad_backward(l, &params).unwrap();
    assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
    assert_eq!(grads.get("used").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn batched_and_shared_matmul_agree_with_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.random()).collect();
    let mut g = Graph::new(Mode::Eval, 0);
    let an = g.constant(Tensor::new(vec![2, 3, 4], a.clone()).unwrap());
    let bn = g.constant(Tensor::new(vec![2, 4, 5], b.clone()).unwrap());
    let c = g.matmul(an, bn).unwrap();
    let out = g.forward(c).unwrap().to_vec();
    for t in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a[t * 12 + i * 4 + p] * b[t * 20 + p * 5 + j]).sum();
                assert!((out[t * 15 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}
