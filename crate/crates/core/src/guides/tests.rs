use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check, GradCheckOptions, Mode};
use crate::stages::{forward_with, ModelConfig, Model};

const LN2: f64 = std::f64::consts::LN_2;

fn goal(rows: usize, cols: usize, y: &[f64]) -> PhasedGoal {
    PhasedGoal::dense(Tensor::new(vec![rows, cols], y.to_vec()).unwrap()).unwrap()
}

/// Evaluates `f` with `c` bound as parameter "c"; returns (loss, dL/dc).
fn eval_with<F>(c: &[f64], shape: &[usize], f: F) -> (f64, Vec<f64>)
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let mut p = ParamStore::new(0);
    p.insert("c", Tensor::new(shape.to_vec(), c.to_vec()).unwrap()).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let cn = g.param(&p, "c").unwrap();
    let loss = f(&mut g, cn);
    let v = g.forward(loss).unwrap()[0];
    let grads = g.grad_backward(loss, &p).unwrap();
    (v, grads.get("c").unwrap().data().to_vec())
}

fn ic(c: &[f64], gl: &PhasedGoal) -> f64 {
    eval_with(c, gl.y.shape(), |g, c| loss_ic(g, c, gl).unwrap().0).0
}

#[test]
fn ic_examples() {
    let y = goal(1, 3, &[1.0, 3.0, 2.0]);
    assert!((ic(&[1.0, 3.0, 2.0], &y) + 1.0).abs() < 1e-12);
    assert!((ic(&[-1.0, -3.0, -2.0], &y) - 1.0).abs() < 1e-12);
    assert!((ic(&[1.0, 2.0, 3.0], &y) + 0.5).abs() < 1e-12);
    // return-scale goals still give −1 at c = y
    let r = [0.012, -0.004, 0.007, -0.015, 0.001];
    assert!((ic(&r, &goal(1, 5, &r)) + 1.0).abs() < 1e-8);
}

#[test]
fn ic_degenerate_days_contribute_zero() {
    let y = goal(2, 3, &[1.0, 1.0, 1.0, 1.0, 3.0, 2.0]);
    let mut g = Graph::new(Mode::Eval, 0);
    let c = g.constant(Tensor::new(vec![2, 3], vec![1.0, 3.0, 2.0, 1.0, 3.0, 2.0]).unwrap());
    let (l, degenerate) = loss_ic(&mut g, c, &y).unwrap();
    assert_eq!(degenerate, 1);
    assert!((g.forward(l).unwrap()[0] + 0.5).abs() < 1e-12);
    // constant c on a valid day: correlation 0, finite
    let y = goal(1, 3, &[1.0, 3.0, 2.0]);
    assert_eq!(ic(&[2.0, 2.0, 2.0], &y), 0.0);
}

#[test]
fn ic_is_invariant_to_positive_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-0.03..0.03)).collect();
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gl = goal(2, 6, &y);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let mapped: Vec<f64> = c.iter().map(|v| a * v + b).collect();
        assert!((ic(&c, &gl) - ic(&mapped, &gl)).abs() < 1e-8);
    }
}

#[test]
fn mse_examples() {
    let l = |c: &[f64], y: &[f64]| eval_with(c, &[1, c.len()], |g, c| loss_mse(g, c, &goal(1, y.len(), y)).unwrap()).0;
    assert_eq!(l(&[0.3, -0.2], &[0.3, -0.2]), 0.0);
    assert_eq!(l(&[0.0, 0.0], &[1.0, 1.0]), 1.0);
    assert_eq!(l(&[0.5], &[0.0]), 0.25);
}

#[test]
fn clf_examples() {
    let l = |c: &[f64], y: &[f64]| eval_with(c, &[1, c.len()], |g, c| loss_clf(g, c, &goal(1, y.len(), y)).unwrap()).0;
    assert!((l(&[0.0; 4], &[0.1, 0.2, -0.3, 0.0]) - LN2).abs() < 1e-9);
    assert!((l(&[0.0, 0.0], &[0.01, -0.01]) - LN2).abs() < 1e-9);
    let y = [0.03, -0.01, 0.02, -0.02];
    assert!(l(&[20.0, -20.0, 20.0, -20.0], &y) < 1e-8);
    assert_eq!(median_split_labels(&goal(1, 4, &y)), vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn rank_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = |c: &[f64], y: &[f64]| {
        let gl = goal(1, y.len(), y);
        eval_with(c, &[1, c.len()], |g, c| loss_rank(g, c, &gl, 32, &mut rng.clone()).unwrap().unwrap()).0
    };
    assert!((l(&[1.0, 0.0], &[0.02, 0.01]) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l(&[0.0; 5], &[0.05, 0.01, -0.02, 0.03, 0.0]) - LN2).abs() < 1e-9);
    assert!(l(&[80.0, 20.0, 40.0, 0.0, 60.0], &[0.05, 0.01, 0.02, -0.02, 0.03]) < 1e-8);

    // all goals equal: no pair anywhere
    let mut g = Graph::new(Mode::Eval, 0);
    let c = g.constant(Tensor::zeros(&[1, 3]));
    assert!(loss_rank(&mut g, c, &goal(1, 3, &[0.1; 3]), 32, &mut rng).unwrap().is_none());
}

#[test]
fn rank_pairs_are_capped_and_seeded() {
    let y: Vec<f64> = (0..20).map(|i| i as f64 * 0.001).collect();
    let gl = goal(1, 20, &y);
    let a = sample_rank_pairs(&gl, 32, &mut ChaCha8Rng::seed_from_u64(5));
    let b = sample_rank_pairs(&gl, 32, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a.len(), 32);
    assert_eq!(a, b);
    assert!(a.iter().all(|&(i, j)| y[i] > y[j]));
}

#[test]
fn xs_return_examples() {
    let l = |c: &[f64], y: &[f64]| eval_with(c, &[1, c.len()], |g, c| loss_xs_return(g, c, &goal(1, y.len(), y)).unwrap()).0;
    assert_eq!(l(&[0.4, 0.4], &[0.01, -0.01]), 0.0);
    assert!((l(&[10.0, -10.0], &[0.02, -0.02]) + 0.02).abs() < 1e-9);
    assert_eq!(l(&[1.0, -3.0, 2.0], &[0.0; 3]), 0.0);
}

#[test]
fn xs_return_is_shift_invariant_per_day() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y: Vec<f64> = (0..8).map(|_| rng.random_range(-0.03..0.03)).collect();
    let c: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let gl = goal(2, 4, &y);
    let shifted: Vec<f64> = c.iter().enumerate().map(|(k, v)| v + if k < 4 { 3.0 } else { -1.5 }).collect();
    let f = |c: &[f64]| eval_with(c, &[2, 4], |g, c| loss_xs_return(g, c, &gl).unwrap()).0;
    assert!((f(&c) - f(&shifted)).abs() < 1e-14);
}

#[test]
fn masked_entries_get_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = Tensor::new(vec![2, 5], (0..10).map(|_| rng.random_range(-0.03..0.03)).collect()).unwrap();
    let mask = vec![true, false, true, true, true, true, true, false, false, true];
    let gl = PhasedGoal::new(y, mask.clone()).unwrap();
    let c: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prng = ChaCha8Rng::seed_from_u64(1);
    let grads = [
        eval_with(&c, &[2, 5], |g, c| loss_ic(g, c, &gl).unwrap().0).1,
        eval_with(&c, &[2, 5], |g, c| loss_mse(g, c, &gl).unwrap()).1,
        eval_with(&c, &[2, 5], |g, c| loss_clf(g, c, &gl).unwrap()).1,
        eval_with(&c, &[2, 5], |g, c| loss_rank(g, c, &gl, 4, &mut prng.clone()).unwrap().unwrap()).1,
        eval_with(&c, &[2, 5], |g, c| loss_xs_return(g, c, &gl).unwrap()).1,
    ];
    for (k, grad) in grads.iter().enumerate() {
        for (i, (&m, &d)) in mask.iter().zip(grad).enumerate() {
            if !m {
                assert!(d == 0.0, "loss {k} entry {i}: {d}");
            }
        }
        assert!(grad.iter().any(|&d| d != 0.0));
    }
}

#[test]
fn losses_are_bounded_below() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..40 {
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-0.05..0.05)).collect();
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-30.0..30.0)).collect();
        let gl = goal(3, 4, &y);
        let max_abs = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let seed = rng.random::<u64>();
        let v = |f: &dyn Fn(&mut Graph, NodeId) -> NodeId| eval_with(&c, &[3, 4], f).0;
        assert!(v(&|g, c| loss_ic(g, c, &gl).unwrap().0) >= -1.0);
        assert!(v(&|g, c| loss_mse(g, c, &gl).unwrap()) >= 0.0);
        assert!(v(&|g, c| loss_clf(g, c, &gl).unwrap()) >= 0.0);
        assert!(v(&|g, c| loss_rank(g, c, &gl, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().unwrap()) >= 0.0);
        assert!(v(&|g, c| loss_xs_return(g, c, &gl).unwrap()) >= -max_abs - 1e-15);
    }
}

#[test]
fn every_loss_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_range(-0.03..0.03)).collect()).unwrap();
    let mask: Vec<bool> = (0..18).map(|k| k % 7 != 3).collect();
    let gl = PhasedGoal::new(y, mask).unwrap();
    let mut params = ParamStore::new(0);
    params
        .insert("c", Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .unwrap();
    for kind in LossKind::ALL {
        let spec = GuideSpec::new(Stage::Temporal, kind, 1.0);
        let report = grad_check::<_, DiffError>(
            |p| {
                let mut g = Graph::new(Mode::Eval, 0);
                let c = g.param(p, "c")?;
                let (l, _) = guided_loss(&mut g, &spec, c, &gl, &mut ChaCha8Rng::seed_from_u64(4))?;
                Ok((g, l.unwrap()))
            },
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{kind:?}: {:?}", report.failures().collect::<Vec<_>>());
    }
}

#[test]
fn attach_registers_one_head_per_guide() {
    let model = Model::new(ModelConfig::default(), 4, 3).unwrap();
    let mut params = model.params.clone();
    let guides = attach(&mut params, 32, &[]).unwrap();
    assert!(guides.is_empty());
    assert_eq!(params, model.params);

    let guides = attach(&mut params, 32, &[GuideSpec::new(Stage::Temporal, LossKind::Ic, 1.0)]).unwrap();
    assert_eq!(guides.len(), 1);
    assert_eq!(params.len(), model.params.len() + 2);
    assert_eq!(params.get("guide.temporal.ic.w").unwrap().shape(), &[32, 1]);
    assert_eq!(params.get("guide.temporal.ic.b").unwrap().shape(), &[1]);

    let mut params = model.params.clone();
    let two = [
        GuideSpec::new(Stage::Temporal, LossKind::Ic, 1.4),
        GuideSpec::new(Stage::CrossSectional, LossKind::XsReturn, 1.4),
    ];
    attach(&mut params, 32, &two).unwrap();
    assert_eq!(params.num_scalars(), model.params.num_scalars() + 2 * 33);
}

#[test]
fn attach_rejects_bad_specs() {
    let mut params = ParamStore::new(0);
    let dup = [
        GuideSpec::new(Stage::Temporal, LossKind::Ic, 1.0),
        GuideSpec::new(Stage::Temporal, LossKind::Ic, 2.0),
    ];
    assert!(matches!(attach(&mut params, 8, &dup), Err(GuideError::Duplicate(_))));
    let pos = [GuideSpec::new(Stage::Positions, LossKind::Mse, 1.0)];
    assert!(matches!(attach(&mut params, 8, &pos), Err(GuideError::UnknownPlacement(_))));
    let mut ident = GuideSpec::new(Stage::Embedding, LossKind::Mse, 1.0);
    ident.head = HeadKind::Identity;
    assert!(matches!(attach(&mut params, 8, &[ident]), Err(GuideError::Spec(_))));
    let neg = GuideSpec::new(Stage::Embedding, LossKind::Mse, -0.1);
    assert!(matches!(attach(&mut params, 8, &[neg]), Err(GuideError::Spec(_))));
    assert!(params.is_empty());

    let bad: Result<GuideSpec, _> = serde_json::from_str(r#"{"placement":"decoder","loss":"ic","lambda":1}"#);
    assert!(bad.is_err());
}

#[test]
fn spec_json_defaults() {
    let s: GuideSpec = serde_json::from_str(r#"{"placement":"cross_sectional","loss":"xs_return","lambda":1.4}"#).unwrap();
    assert_eq!(s, GuideSpec::new(Stage::CrossSectional, LossKind::XsReturn, 1.4));
    let back: GuideSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}

fn window(t: usize, n: usize, w: usize, f: usize, seed: u64) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = Tensor::new(vec![t, n, w, f], (0..t * n * w * f).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = Tensor::new(vec![t, n], (0..t * n).map(|_| rng.random_range(-0.03..0.03)).collect()).unwrap();
    WindowBatch {
        start: 0,
        day_ids: (0..t as i64).collect(),
        indices: (0..n).collect(),
        features: feats,
        labels,
        mask: vec![true; t * n],
    }
}

#[test]
fn evaluate_guides_weights_in_declaration_order() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        ..Default::default()
    };
    let model = Model::new(cfg.clone(), 3, 4).unwrap();
    let batch = window(3, 5, 4, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut params = model.params.clone();
    let none = attach(&mut params, 8, &[]).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &Binder::new(&params), &cfg, &batch.features).unwrap();
    let eval = evaluate_guides(&mut g, &Binder::new(&params), &none, &out, &batch, &mut rng).unwrap();
    assert!(eval.terms.is_empty() && eval.weighted.is_none());

    let specs: Vec<GuideSpec> = [Stage::Embedding, Stage::Temporal, Stage::CrossSectional]
        .into_iter()
        .zip(LossKind::ALL)
        .map(|(s, k)| GuideSpec::new(s, k, 1.4))
        .collect();
    let guides = attach(&mut params, 8, &specs).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &Binder::new(&params), &cfg, &batch.features).unwrap();
    let eval = evaluate_guides(&mut g, &Binder::new(&params), &guides, &out, &batch, &mut rng).unwrap();
    let names: Vec<&str> = eval.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["embedding/ic", "temporal/mse", "cross_sectional/clf"]);
    let weighted = g.forward(eval.weighted.unwrap()).unwrap()[0];
    let mut expect = 0.0;
    for t in &eval.terms {
        expect += t.lambda * g.forward(t.loss).unwrap()[0];
    }
    assert!((weighted - expect).abs() < 1e-12);
}
