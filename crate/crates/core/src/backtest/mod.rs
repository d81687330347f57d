//! Daily close-to-close backtest with proportional costs, and the
//! evaluation metrics computed from its excess-return series.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::ReturnPanel;
use crate::objective::{mean_std, sharpe_value, TRADING_DAYS};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("calendar mismatch: {0}")]
    Calendar(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// One-way cost per unit of traded notional.
    pub cost_rate: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { cost_rate: 0.003 }
    }
}

/// Target weights per day, (T × N) over the full universe.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSeries {
    pub day_ids: Vec<i64>,
    pub n_instruments: usize,
    pub weights: Vec<f64>,
}

impl PositionSeries {
    pub fn new(day_ids: Vec<i64>, n_instruments: usize, weights: Vec<f64>) -> Result<Self, BacktestError> {
        if weights.len() != day_ids.len() * n_instruments {
            return Err(BacktestError::Invalid(format!(
                "{} weights for {} days × {n_instruments} instruments",
                weights.len(),
                day_ids.len()
            )));
        }
        for (t, row) in weights.chunks(n_instruments.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(BacktestError::Invalid(format!("positions on day {} are not a distribution", day_ids[t])));
            }
        }
        Ok(Self {
            day_ids,
            n_instruments,
            weights,
        })
    }

    pub fn n_days(&self) -> usize {
        self.day_ids.len()
    }

    pub fn day(&self, t: usize) -> &[f64] {
        &self.weights[t * self.n_instruments..(t + 1) * self.n_instruments]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub day_ids: Vec<i64>,
    pub excess: Vec<f64>,
    /// Traded notional per day, `Σ|h_t − drift(h_{t−1})|`.
    pub turnover: Vec<f64>,
    /// Held weights (T × N).
    pub held: Vec<f64>,
}

/// Weights after one day of returns, renormalized. Cash (all zero) stays
/// cash.
fn drift(h: &[f64], r: &[f64]) -> Vec<f64> {
    let grown: Vec<f64> = h.iter().zip(r).map(|(w, x)| w * (1.0 + x)).collect();
    let total: f64 = grown.iter().sum();
    if total > 0.0 {
        grown.iter().map(|g| g / total).collect()
    } else {
        vec![0.0; h.len()]
    }
}

/// Simulates holding `positions` through `returns`. `tradable` is the
/// (days × N) flag block of the panel `returns` is aligned with. Weights on
/// non-tradable instruments stay at their drifted value; the remaining mass
/// follows the tradable part of the target.
pub fn simulate(
    positions: &PositionSeries,
    returns: &ReturnPanel,
    tradable: &[bool],
    cfg: &BacktestConfig,
) -> Result<Simulation, BacktestError> {
    let n = returns.n_instruments();
    if positions.n_instruments != n || tradable.len() != returns.n_days() * n {
        return Err(BacktestError::Calendar(format!(
            "positions over {} instruments, returns over {n}, tradable block of {}",
            positions.n_instruments,
            tradable.len()
        )));
    }
    if !(cfg.cost_rate >= 0.0) {
        return Err(BacktestError::Invalid(format!("cost_rate must be ≥ 0, got {}", cfg.cost_rate)));
    }
    let t_len = positions.n_days();
    let first = positions.day_ids.first().copied().unwrap_or_default();
    let start = returns
        .day_ids()
        .iter()
        .position(|&d| d == first)
        .ok_or_else(|| BacktestError::Calendar(format!("day {first} is not in the return panel")))?;
    if start + t_len > returns.n_days() || returns.day_ids()[start..start + t_len] != positions.day_ids[..] {
        return Err(BacktestError::Calendar("position days are not a contiguous run of return days".into()));
    }

    let mut held = Vec::with_capacity(t_len * n);
    let mut excess = Vec::with_capacity(t_len);
    let mut turnover = Vec::with_capacity(t_len);
    let mut prev = vec![0.0; n];
    let mut prev_ret = vec![0.0; n];
    for t in 0..t_len {
        let d = start + t;
        let can = &tradable[d * n..(d + 1) * n];
        let before = drift(&prev, &prev_ret);
        let target = positions.day(t);
        let frozen: f64 = (0..n).filter(|&i| !can[i]).map(|i| before[i]).sum();
        let free_target: f64 = (0..n).filter(|&i| can[i]).map(|i| target[i]).sum();
        let free_drift: f64 = (0..n).filter(|&i| can[i]).map(|i| before[i]).sum();
        let n_free = can.iter().filter(|&&c| c).count();
        let room = 1.0 - frozen;
        let h: Vec<f64> = (0..n)
            .map(|i| {
                if !can[i] {
                    before[i]
                } else if free_target > 0.0 {
                    target[i] * room / free_target
                } else if free_drift > 0.0 {
                    before[i] * room / free_drift
                } else {
                    room / n_free as f64
                }
            })
            .collect();
        let h = if n_free == 0 { before.clone() } else { h };
        let traded: f64 = h.iter().zip(&before).map(|(a, b)| (a - b).abs()).sum();
        let r = returns.day(d);
        let gross: f64 = h.iter().zip(r).map(|(w, x)| w * x).sum();
        excess.push(gross - cfg.cost_rate * traded - returns.benchmark()[d]);
        turnover.push(traded);
        held.extend_from_slice(&h);
        prev = h;
        prev_ret = r.to_vec();
    }
    Ok(Simulation {
        day_ids: positions.day_ids.clone(),
        excess,
        turnover,
        held,
    })
}

/// `min_t (S_t − max_{j≤t} S_j)` over cumulative sums `S`, in one pass.
pub fn max_drawdown(r: &[f64]) -> f64 {
    let mut cum = 0.0;
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &x in r {
        cum += x;
        peak = peak.max(cum);
        worst = worst.min(cum - peak);
    }
    worst
}

/// Evaluation metrics. Non-finite values serialize as "inf", "-inf", "nan".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    #[serde(with = "float_text")]
    pub annualized_return: f64,
    #[serde(with = "float_text")]
    pub max_drawdown: f64,
    #[serde(with = "float_text")]
    pub sharpe: f64,
    #[serde(with = "float_text")]
    pub calmar: f64,
    #[serde(with = "float_text")]
    pub mean: f64,
    #[serde(with = "float_text")]
    pub std: f64,
    pub days: usize,
}

impl Metrics {
    /// True when σ = 0 made the Sharpe ratio a sentinel.
    pub fn sharpe_is_sentinel(&self) -> bool {
        self.std == 0.0
    }

    /// True when a zero drawdown made the Calmar ratio a sentinel.
    pub fn calmar_is_sentinel(&self) -> bool {
        self.max_drawdown == 0.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "annualized_return" => self.annualized_return,
            "max_drawdown" => self.max_drawdown,
            "sharpe" => self.sharpe,
            "calmar" => self.calmar,
            "mean" => self.mean,
            "std" => self.std,
            "days" => self.days as f64,
            _ => return None,
        })
    }
}

fn sentinel_ratio(num: f64) -> f64 {
    if num > 0.0 {
        f64::INFINITY
    } else if num < 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::NAN
    }
}

pub fn compute_metrics(r: &[f64]) -> Result<Metrics, BacktestError> {
    if r.len() < 2 {
        return Err(BacktestError::Invalid(format!("metrics need at least 2 days, got {}", r.len())));
    }
    let t = r.len() as f64;
    let annualized_return = TRADING_DAYS / t * r.iter().sum::<f64>();
    let max_drawdown = max_drawdown(r);
    let (mean, std) = mean_std(r);
    let sharpe = if std > 0.0 { sharpe_value(r) } else { sentinel_ratio(mean) };
    let calmar = if max_drawdown < 0.0 {
        annualized_return / max_drawdown.abs()
    } else {
        sentinel_ratio(annualized_return)
    };
    Ok(Metrics {
        annualized_return,
        max_drawdown,
        sharpe,
        calmar,
        mean,
        std,
        days: r.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub metrics: Metrics,
    pub day_ids: Vec<i64>,
    pub excess: Vec<f64>,
    /// Cumulative excess return `Σ_{i≤t} r_i`.
    pub equity: Vec<f64>,
    pub turnover: Vec<f64>,
}

impl BacktestReport {
    pub fn from_simulation(sim: &Simulation) -> Result<Self, BacktestError> {
        let mut cum = 0.0;
        let equity = sim
            .excess
            .iter()
            .map(|x| {
                cum += x;
                cum
            })
            .collect();
        Ok(Self {
            metrics: compute_metrics(&sim.excess)?,
            day_ids: sim.day_ids.clone(),
            excess: sim.excess.clone(),
            equity,
            turnover: sim.turnover.clone(),
        })
    }
}

/// Simulates and scores in one call.
pub fn run_backtest(
    positions: &PositionSeries,
    returns: &ReturnPanel,
    tradable: &[bool],
    cfg: &BacktestConfig,
) -> Result<BacktestReport, BacktestError> {
    BacktestReport::from_simulation(&simulate(positions, returns, tradable, cfg)?)
}

pub const METRICS_FILE: &str = "metrics.json";
pub const EQUITY_FILE: &str = "equity.csv";
pub const TURNOVER_FILE: &str = "turnover.csv";

/// Writes `metrics.json`, `equity.csv` (day_id, cumulative_excess) and
/// `turnover.csv` (day_id, turnover) into `dir`.
pub fn emit_report(report: &BacktestReport, dir: &Path) -> Result<(), BacktestError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&report.metrics)? + "\n")?;
    let series = |name: &str, header: &str, values: &[f64]| -> Result<(), BacktestError> {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["day_id", header])?;
        for (d, v) in report.day_ids.iter().zip(values) {
            w.write_record([d.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    series(EQUITY_FILE, "cumulative_excess", &report.equity)?;
    series(TURNOVER_FILE, "turnover", &report.turnover)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Metrics, BacktestError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Finite floats as JSON numbers; infinities and NaN as strings.
pub mod float_text {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number, \"inf\", \"-inf\" or \"nan\", got {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests;
