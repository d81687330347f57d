use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn panel(n: usize, rets: Vec<f64>) -> ReturnPanel {
    let t = rets.len() / n;
    let bench = rets.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    ReturnPanel::new(n, rets, bench, (0..t as i64).collect()).unwrap()
}

fn random_panel(rng: &mut ChaCha8Rng, t: usize, n: usize) -> ReturnPanel {
    panel(n, (0..t * n).map(|_| rng.random_range(-0.05..0.05)).collect())
}

fn random_positions(rng: &mut ChaCha8Rng, t: usize, n: usize) -> PositionSeries {
    let mut w = Vec::with_capacity(t * n);
    for _ in 0..t {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|x| x / s));
    }
    PositionSeries::new((0..t as i64).collect(), n, w).unwrap()
}

#[test]
fn benchmark_positions_earn_zero_excess() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_panel(&mut rng, 30, 5);
    let pos = PositionSeries::new((0..30).collect(), 5, vec![0.2; 150]).unwrap();
    let sim = simulate(&pos, &p, &[true; 150], &BacktestConfig { cost_rate: 0.0 }).unwrap();
    assert!(sim.excess.iter().all(|r| r.abs() < 1e-15));
}

#[test]
fn first_day_buys_in_from_cash() {
    let p = panel(2, vec![0.01, -0.01, 0.02, 0.0]);
    let pos = PositionSeries::new(vec![0, 1], 2, vec![0.3, 0.7, 0.3, 0.7]).unwrap();
    let sim = simulate(&pos, &p, &[true; 4], &BacktestConfig::default()).unwrap();
    assert_eq!(sim.turnover[0], 1.0);
    let gross = 0.3 * 0.01 + 0.7 * -0.01;
    assert!((sim.excess[0] - (gross - 0.003 - 0.0)).abs() < 1e-15);
}

#[test]
fn non_tradable_weight_is_its_drifted_weight() {
    let p = panel(3, vec![0.05, -0.02, 0.01, 0.0, 0.03, -0.01, 0.02, 0.02, 0.02]);
    let pos = PositionSeries::new(vec![0, 1, 2], 3, vec![0.5, 0.3, 0.2, 0.0, 0.5, 0.5, 1.0, 0.0, 0.0]).unwrap();
    let mut tradable = vec![true; 9];
    tradable[3] = false; // instrument 0 on day 1
    let sim = simulate(&pos, &p, &tradable, &BacktestConfig::default()).unwrap();
    let grown = [0.5 * 1.05, 0.3 * 0.98, 0.2 * 1.01];
    let total: f64 = grown.iter().sum();
    assert_eq!(sim.held[3], grown[0] / total);
    let day1 = &sim.held[3..6];
    assert!((day1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((day1[1] - day1[2]).abs() < 1e-15);
}

#[test]
fn held_weights_stay_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (t, n) = (40, 6);
        let p = random_panel(&mut rng, t, n);
        let pos = random_positions(&mut rng, t, n);
        let mut tradable: Vec<bool> = (0..t * n).map(|_| rng.random::<f64>() > 0.2).collect();
        tradable[..n].fill(false); // first day fully frozen: stays cash
        let sim = simulate(&pos, &p, &tradable, &BacktestConfig::default()).unwrap();
        assert!(sim.held[..n].iter().all(|&w| w == 0.0));
        for row in sim.held.chunks(n).skip(1) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                assert!((s - 1.0).abs() < 1e-8);
            }
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn constant_positions_trade_only_the_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_panel(&mut rng, 10, 3);
    let pos = PositionSeries::new((0..10).collect(), 3, [0.2, 0.5, 0.3].repeat(10)).unwrap();
    let sim = simulate(&pos, &p, &[true; 30], &BacktestConfig { cost_rate: 0.0 }).unwrap();
    for t in 1..10 {
        let drifted = drift(&sim.held[(t - 1) * 3..t * 3], p.day(t - 1));
        let expect: f64 = drifted.iter().zip([0.2, 0.5, 0.3]).map(|(a, b)| (a - b).abs()).sum();
        assert!((sim.turnover[t] - expect).abs() < 1e-15);
    }
}

#[test]
fn misaligned_calendars_are_rejected() {
    let p = panel(2, vec![0.0; 8]);
    let pos = PositionSeries::new(vec![2, 3, 4], 2, vec![0.5; 6]).unwrap();
    assert!(matches!(simulate(&pos, &p, &[true; 8], &BacktestConfig::default()), Err(BacktestError::Calendar(_))));
    let pos = PositionSeries::new(vec![9], 2, vec![0.5; 2]).unwrap();
    assert!(matches!(simulate(&pos, &p, &[true; 8], &BacktestConfig::default()), Err(BacktestError::Calendar(_))));
    assert!(PositionSeries::new(vec![0], 2, vec![0.5, 0.6]).is_err());
}

#[test]
fn metric_examples() {
    let m = compute_metrics(&[0.001; 238]).unwrap();
    assert!((m.annualized_return - 0.238).abs() < 1e-12);
    assert_eq!(m.max_drawdown, 0.0);
    assert!(m.calmar_is_sentinel());

    let m = compute_metrics(&[0.25; 4]).unwrap();
    assert_eq!(m.sharpe, f64::INFINITY);
    assert!(m.sharpe_is_sentinel());
    assert!(compute_metrics(&[0.0; 4]).unwrap().sharpe.is_nan());

    let m = compute_metrics(&[0.01, -0.02, 0.01]).unwrap();
    assert!((m.max_drawdown + 0.02).abs() < 1e-15);
    assert!((m.calmar * m.max_drawdown.abs() - m.annualized_return).abs() < 1e-10);

    let m = compute_metrics(&[0.01, 0.03]).unwrap();
    assert!((m.sharpe - 21.817).abs() < 1e-3);
    assert!(compute_metrics(&[0.01]).is_err());
}

#[test]
fn drawdown_matches_quadratic_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let r: Vec<f64> = (0..100).map(|_| rng.random_range(-0.03..0.03)).collect();
        let cum: Vec<f64> = r.iter().scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        }).collect();
        let mut brute = f64::INFINITY;
        for t in 0..cum.len() {
            let peak = cum[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            brute = brute.min(cum[t] - peak);
        }
        assert!((max_drawdown(&r) - brute).abs() <= 1e-12);
    }
}

#[test]
fn report_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_panel(&mut rng, 25, 4);
    let pos = random_positions(&mut rng, 25, 4);
    let report = run_backtest(&pos, &p, &[true; 100], &BacktestConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), report.metrics);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["annualized_return", "calmar", "days", "max_drawdown", "mean", "sharpe", "std"]);
    let equity = std::fs::read_to_string(dir.path().join(EQUITY_FILE)).unwrap();
    assert_eq!(equity.lines().count(), 26);
    assert_eq!(equity.lines().next(), Some("day_id,cumulative_excess"));
    let last: f64 = equity.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(last, *report.equity.last().unwrap());

    // sentinels survive the file
    let flat = BacktestReport {
        metrics: compute_metrics(&[0.001, 0.001]).unwrap(),
        day_ids: vec![0, 1],
        excess: vec![0.001; 2],
        equity: vec![0.001, 0.002],
        turnover: vec![1.0, 0.0],
    };
    emit_report(&flat, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(text.contains("\"sharpe\": \"inf\""));
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().calmar, f64::INFINITY);
}
