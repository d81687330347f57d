//! Out-of-sample positions: straight from a staged model, or from
//! predictions fed through the mean-variance optimizer.

use crate::backtest::PositionSeries;
use crate::dataflow::DayRange;
use crate::diff::{Graph, Mode};
use crate::mvopt::{shrunk_covariance, solve, MvConfig, MvProblem};
use crate::stages::{forward_with, predict_with, Binder, ModelConfig};

use super::{Dataset, TrainError};
use crate::dataflow::window_at;

/// Days per forward pass when scoring a long range.
const CHUNK_DAYS: usize = 22;

/// Eval-mode predictions for the tradable instruments of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPredictions {
    pub day: usize,
    pub indices: Vec<usize>,
    pub predictions: Vec<f64>,
}

fn chunks(range: DayRange) -> impl Iterator<Item = (usize, usize)> {
    (range.start..range.end)
        .step_by(CHUNK_DAYS)
        .map(move |s| (s, CHUNK_DAYS.min(range.end - s)))
}

/// Predictor outputs over `range`. Every instrument is scored; the
/// per-instrument stages never mix instruments, so only tradable ones are
/// kept afterwards.
pub fn predict_days(p: &Binder, cfg: &ModelConfig, data: &Dataset, range: DayRange) -> Result<Vec<DayPredictions>, TrainError> {
    let n = data.features.n_instruments();
    let all: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(range.len());
    for (start, len) in chunks(range) {
        let batch = window_at(&data.features, &data.returns, start, len, &all)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let (pred, _) = predict_with(&mut g, p, cfg, &batch.features)?;
        let values = g.forward(pred)?.to_vec();
        for t in 0..len {
            let day = start + t;
            let indices = data.features.tradable_on(day);
            let predictions = indices.iter().map(|&i| values[t * n + i]).collect();
            out.push(DayPredictions { day, indices, predictions });
        }
    }
    Ok(out)
}

/// Eval-mode positions of a staged model over the full universe.
pub fn model_positions(p: &Binder, cfg: &ModelConfig, data: &Dataset, range: DayRange) -> Result<PositionSeries, TrainError> {
    let n = data.features.n_instruments();
    let all: Vec<usize> = (0..n).collect();
    let mut weights = Vec::with_capacity(range.len() * n);
    for (start, len) in chunks(range) {
        let batch = window_at(&data.features, &data.returns, start, len, &all)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let out = forward_with(&mut g, p, cfg, &batch.features)?;
        weights.extend_from_slice(g.forward(out.positions)?);
    }
    let ids = data.features.day_ids()[range.start..range.end].to_vec();
    Ok(PositionSeries::new(ids, n, weights)?)
}

fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let sd = var.sqrt();
        x.iter().map(|v| (v - mean) / sd).collect()
    } else {
        vec![0.0; x.len()]
    }
}

/// Mean-variance positions from daily predictions. Expected returns are
/// `signal_scale · zscore(prediction) · trailing volatility`; the covariance
/// is the shrunk estimate over the `cfg.lookback` days before each day.
/// Instruments missing from a day's predictions get zero weight.
pub fn mv_positions(days: &[DayPredictions], data: &Dataset, cfg: &MvConfig, signal_scale: f64) -> Result<PositionSeries, TrainError> {
    cfg.validate()?;
    if !(signal_scale.is_finite() && signal_scale >= 0.0) {
        return Err(TrainError::Config(format!("signal_scale must be ≥ 0, got {signal_scale}")));
    }
    let n = data.returns.n_instruments();
    let mut weights = Vec::with_capacity(days.len() * n);
    let mut ids = Vec::with_capacity(days.len());
    for dp in days {
        let k = dp.indices.len();
        let mut row = vec![0.0; n];
        let hist_start = dp.day.saturating_sub(cfg.lookback);
        if k == 0 {
            return Err(TrainError::Config(format!("no tradable instrument on day {}", dp.day)));
        }
        if dp.day - hist_start < 2 {
            for &i in &dp.indices {
                row[i] = 1.0 / k as f64;
            }
        } else {
            let hist: Vec<Vec<f64>> = (hist_start..dp.day)
                .map(|d| dp.indices.iter().map(|&i| data.returns.get(d, i)).collect())
                .collect();
            let refs: Vec<&[f64]> = hist.iter().map(|r| r.as_slice()).collect();
            let sigma = shrunk_covariance(&refs, cfg.shrinkage)?;
            let z = zscore(&dp.predictions);
            let mu_hat = (0..k).map(|j| signal_scale * z[j] * sigma[j * k + j].sqrt()).collect();
            let problem = MvProblem {
                mu_hat,
                sigma,
                gamma: cfg.gamma,
                w_max: cfg.w_max.max(1.0 / k as f64),
            };
            let sol = solve(&problem, cfg.max_iters, cfg.tol)?;
            for (&i, &w) in dp.indices.iter().zip(&sol.weights) {
                row[i] = w;
            }
        }
        weights.extend(row);
        ids.push(data.features.day_ids()[dp.day]);
    }
    Ok(PositionSeries::new(ids, n, weights)?)
}
