use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check, GradCheckOptions, Mode, ParamStore};
use crate::guides::GuideTerm;

fn series(g: &mut Graph, r: &[f64]) -> NodeId {
    g.constant(Tensor::vector(r.to_vec()))
}

fn utility(r: &[f64]) -> f64 {
    let mut g = Graph::new(Mode::Eval, 0);
    let s = series(&mut g, r);
    let u = sharpe_utility(&mut g, s).unwrap();
    g.forward(u).unwrap()[0]
}

#[test]
fn portfolio_return_examples() {
    let mut g = Graph::new(Mode::Eval, 0);
    let pos = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let ret = Tensor::matrix(2, 2, vec![0.02, 0.0, 0.0, 0.04]).unwrap();
    let r = portfolio_returns(&mut g, pos, &ret, &[0.01, 0.01]).unwrap();
    let v = g.forward(r).unwrap().to_vec();
    assert!((v[0] - 0.01).abs() < 1e-15 && (v[1] - 0.03).abs() < 1e-15);

    // equal weight against the subset mean is flat
    let ret = Tensor::matrix(3, 4, (0..12).map(|k| (k as f64 * 0.37).sin() * 0.02).collect()).unwrap();
    let bench: Vec<f64> = ret.data().chunks(4).map(|row| row.iter().sum::<f64>() / 4.0).collect();
    let pos = g.constant(Tensor::filled(&[3, 4], 0.25));
    let r = portfolio_returns(&mut g, pos, &ret, &bench).unwrap();
    assert!(g.forward(r).unwrap().iter().all(|v| v.abs() < 1e-17));

    let bad = g.constant(Tensor::filled(&[3, 3], 0.25));
    assert!(portfolio_returns(&mut g, bad, &ret, &bench).is_err());
}

#[test]
fn sharpe_examples() {
    let u = utility(&[0.01, 0.03]);
    // μ = 0.02, σ = 0.01·√2
    let expect = 238f64.sqrt() * 2f64.sqrt();
    assert!((u - 21.817).abs() < 1e-3, "{u}");
    assert!((u - expect).abs() < 1e-6);
    assert_eq!(u, sharpe_value(&[0.01, 0.03]));

    let flat = utility(&[0.002, 0.002]);
    assert!(flat.is_finite());
    assert!((flat - 0.002 * 238f64.sqrt() / SHARPE_EPS).abs() / flat < 1e-9);
    assert!(sharpe_guard_dominated(&[0.002, 0.002]));
    assert!(!sharpe_guard_dominated(&[0.01, 0.03]));

    let mut g = Graph::new(Mode::Eval, 0);
    let one = series(&mut g, &[0.01]);
    assert!(sharpe_utility(&mut g, one).is_err());
}

#[test]
fn sharpe_is_scale_invariant_and_monotone_in_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let r: Vec<f64> = (0..22).map(|_| rng.random_range(-0.02..0.02)).collect();
        let a = rng.random_range(0.1..10.0);
        let scaled: Vec<f64> = r.iter().map(|v| a * v).collect();
        let (u, us) = (utility(&r), utility(&scaled));
        assert!((u - us).abs() <= 1e-9 * u.abs().max(1.0));

        let mut prev = f64::NEG_INFINITY;
        for k in -20..=20 {
            let c = k as f64 * 1e-3;
            let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
            let u = utility(&shifted);
            assert!(u > prev);
            prev = u;
        }
    }
}

#[test]
fn sharpe_value_matches_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in 2..40 {
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-0.05..0.05)).collect();
        assert_eq!(sharpe_value(&r), utility(&r));
    }
}

fn term(g: &mut Graph, name: &str, lambda: f64, loss: f64) -> GuideTerm {
    GuideTerm {
        name: name.into(),
        lambda,
        loss: g.scalar(loss),
        skipped_days: 0,
    }
}

fn eval_of(g: &mut Graph, terms: Vec<GuideTerm>) -> GuideEvaluation {
    let mut weighted = None;
    for t in &terms {
        let w = g.scale(t.loss, t.lambda).unwrap();
        weighted = Some(match weighted {
            Some(acc) => g.add(acc, w).unwrap(),
            None => w,
        });
    }
    GuideEvaluation { terms, weighted }
}

#[test]
fn compose_examples() {
    let mut g = Graph::new(Mode::Eval, 0);
    let u = g.scalar(21.817);
    let c = compose(&mut g, &GuideEvaluation::default(), u, None).unwrap();
    assert_eq!(g.forward(c.total).unwrap()[0], -21.817);

    let u = g.scalar(10.0);
    let ev = {
        let t = term(&mut g, "temporal/ic", 2.0, -0.5);
        eval_of(&mut g, vec![t])
    };
    let c = compose(&mut g, &ev, u, None).unwrap();
    assert_eq!(g.forward(c.total).unwrap()[0], -11.0);
    assert_eq!(c.guide_terms.len(), 1);

    let ev = {
        let a = term(&mut g, "temporal/ic", 0.0, -0.7);
        let b = term(&mut g, "cross_sectional/xs_return", 0.0, 0.3);
        eval_of(&mut g, vec![a, b])
    };
    let c = compose(&mut g, &ev, u, None).unwrap();
    assert_eq!(g.forward(c.total).unwrap()[0], -10.0);

    let ev = {
        let t = term(&mut g, "temporal/ic", -1.0, 0.1);
        eval_of(&mut g, vec![t])
    };
    assert!(compose(&mut g, &ev, u, None).is_err());
}

#[test]
fn compose_is_linear_in_each_term() {
    let total = |l1: f64, l2: f64| {
        let mut g = Graph::new(Mode::Eval, 0);
        let u = g.scalar(3.5);
        let a = term(&mut g, "a", 1.4, l1);
        let b = term(&mut g, "b", 0.6, l2);
        let ev = eval_of(&mut g, vec![a, b]);
        let c = compose(&mut g, &ev, u, None).unwrap();
        g.forward(c.total).unwrap()[0]
    };
    let slope1 = (total(0.9, 0.2) - total(-0.3, 0.2)) / 1.2;
    let slope2 = (total(0.1, 1.7) - total(0.1, -0.8)) / 2.5;
    assert!((slope1 - 1.4).abs() < 1e-12);
    assert!((slope2 - 0.6).abs() < 1e-12);
}

#[test]
fn turnover_counts_position_changes() {
    let mut g = Graph::new(Mode::Eval, 0);
    let pos = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
    let t = turnover(&mut g, pos).unwrap();
    assert_eq!(g.forward(t).unwrap()[0], 1.0);
    let u = g.scalar(2.0);
    let c = compose(&mut g, &GuideEvaluation::default(), u, Some((0.5, t))).unwrap();
    assert_eq!(g.forward(c.total).unwrap()[0], -1.5);
}

#[test]
fn sharpe_of_softmax_positions_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let returns = Tensor::matrix(5, 8, (0..40).map(|_| rng.random_range(-0.03..0.03)).collect()).unwrap();
    let bench: Vec<f64> = returns.data().chunks(8).map(|r| r.iter().sum::<f64>() / 8.0).collect();
    let mut params = ParamStore::new(0);
    params
        .insert("s", Tensor::matrix(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .unwrap();
    let report = grad_check::<_, ObjectiveError>(
        |p| {
            let mut g = Graph::new(Mode::Eval, 0);
            let s = g.param(p, "s")?;
            let w = g.softmax(s, 1)?;
            let r = portfolio_returns(&mut g, w, &returns, &bench)?;
            let u = sharpe_utility(&mut g, r)?;
            Ok((g, u))
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn loss_log_writes_one_json_object_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut g = Graph::new(Mode::Eval, 0);
    let u = g.scalar(1.25);
    let ev = {
        let t = term(&mut g, "temporal/ic", 1.0, -0.25);
        eval_of(&mut g, vec![t])
    };
    let c = compose(&mut g, &ev, u, None).unwrap();
    let mut log = LossLog::create(&path).unwrap();
    for it in 0..3 {
        log.append(&LossRecord::from_graph(&mut g, it, &c).unwrap()).unwrap();
    }
    log.flush().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let rec: LossRecord = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(rec.iteration, 2);
    assert_eq!(rec.total, -1.5);
    assert_eq!(rec.guides[0].loss, -0.25);
}
