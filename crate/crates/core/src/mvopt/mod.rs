//! Long-only mean-variance optimizer over the capped simplex
//! `{w : 0 ≤ w ≤ w_max, Σw = 1}`, solved by projected gradient ascent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MvError {
    #[error("infeasible: {n} assets with cap {w_max} cannot sum to 1")]
    Infeasible { n: usize, w_max: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("covariance is not positive semidefinite (curvature {0:e})")]
    NotPsd(f64),
}

/// Tolerated negative curvature before a covariance is rejected.
const PSD_TOL: f64 = 1e-8;
const STEP_EPS: f64 = 1e-12;
const POWER_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvConfig {
    pub gamma: f64,
    pub w_max: f64,
    /// Trailing days in the covariance estimate.
    pub lookback: usize,
    /// Weight on the diagonal target, in [0, 1].
    pub shrinkage: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MvConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            w_max: 0.2,
            lookback: 60,
            shrinkage: 0.5,
            max_iters: 10_000,
            tol: 1e-10,
        }
    }
}

impl MvConfig {
    pub fn validate(&self) -> Result<(), MvError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(MvError::Invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.w_max > 0.0 && self.w_max <= 1.0) {
            return Err(MvError::Invalid(format!("w_max must be in (0, 1], got {}", self.w_max)));
        }
        if self.lookback < 2 {
            return Err(MvError::Invalid("covariance lookback must be ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(MvError::Invalid(format!("shrinkage must be in [0, 1], got {}", self.shrinkage)));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(MvError::Invalid("max_iters and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvProblem {
    pub mu_hat: Vec<f64>,
    /// Row-major (n × n).
    pub sigma: Vec<f64>,
    pub gamma: f64,
    pub w_max: f64,
}

impl MvProblem {
    pub fn n(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn validate(&self) -> Result<(), MvError> {
        let n = self.n();
        if n == 0 {
            return Err(MvError::Invalid("no assets".into()));
        }
        if self.sigma.len() != n * n {
            return Err(MvError::Invalid(format!("sigma has {} entries for {n} assets", self.sigma.len())));
        }
        if !(self.gamma > 0.0) || !(self.w_max > 0.0 && self.w_max <= 1.0) {
            return Err(MvError::Invalid(format!("gamma {} / w_max {}", self.gamma, self.w_max)));
        }
        if (n as f64) * self.w_max < 1.0 {
            return Err(MvError::Infeasible { n, w_max: self.w_max });
        }
        if self.mu_hat.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(MvError::Invalid("non-finite input".into()));
        }
        for i in 0..n {
            if self.sigma[i * n + i] < 0.0 {
                return Err(MvError::Invalid(format!("negative variance on asset {i}")));
            }
            for j in 0..i {
                if (self.sigma[i * n + j] - self.sigma[j * n + i]).abs() > 1e-10 {
                    return Err(MvError::Invalid(format!("sigma not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// `μ̂ᵀw − (γ/2)·wᵀΣw`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let sw = matvec(&self.sigma, w);
        dot(&self.mu_hat, w) - 0.5 * self.gamma * dot(w, &sw)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn capped_sum(v: &[f64], tau: f64, w_max: f64) -> f64 {
    v.iter().map(|x| (x - tau).clamp(0.0, w_max)).sum()
}

/// Euclidean projection onto the capped simplex, by bisection on the
/// threshold τ in `w_i = clamp(v_i − τ, 0, w_max)`.
pub fn simplex_project(v: &[f64], w_max: f64) -> Result<Vec<f64>, MvError> {
    let n = v.len();
    if n == 0 || (n as f64) * w_max < 1.0 {
        return Err(MvError::Infeasible { n, w_max });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MvError::Invalid("non-finite input to projection".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    // sum is n·w_max ≥ 1 at lo and 0 at hi
    let (mut lo, mut hi) = (min - w_max, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if capped_sum(v, mid, w_max) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Solve τ exactly on the active set found by bisection.
    let tau = lo;
    let mut capped = 0usize;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for &x in v {
        let w = x - tau;
        if w >= w_max {
            capped += 1;
        } else if w > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    let tau = if free > 0 {
        (free_sum + capped as f64 * w_max - 1.0) / free as f64
    } else {
        tau
    };
    let mut w: Vec<f64> = v.iter().map(|x| (x - tau).clamp(0.0, w_max)).collect();
    // absorb the last rounding residual in the largest uncapped entry
    let resid = 1.0 - w.iter().sum::<f64>();
    if resid != 0.0 {
        if let Some(k) = (0..n).filter(|&k| w[k] + resid >= 0.0 && w[k] + resid <= w_max).max_by(|&a, &b| w[a].total_cmp(&w[b])) {
            w[k] += resid;
        }
    }
    Ok(w)
}

/// Largest eigenvalue of a symmetric matrix by power iteration (Rayleigh
/// quotient of the final iterate).
pub fn power_iteration(m: &[f64], n: usize, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i as f64 + 1.0).sin()).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mv = matvec(m, &v);
        let norm = dot(&mv, &mv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = mv.iter().map(|x| x / norm).collect();
        lambda = dot(&next, &matvec(m, &next));
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    lambda
}

/// (λ_max, λ_min) of a symmetric matrix; λ_min comes from the shifted
/// matrix `λ_max·I − M`.
fn eigen_bounds(m: &[f64], n: usize) -> (f64, f64) {
    let trace_bound: f64 = (0..n).map(|i| (0..n).map(|j| m[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    let lmax = power_iteration(m, n, POWER_ITERS);
    let shift = trace_bound.max(lmax);
    let mut shifted: Vec<f64> = m.iter().map(|x| -x).collect();
    for i in 0..n {
        shifted[i * n + i] += shift;
    }
    let lmin = shift - power_iteration(&shifted, n, POWER_ITERS);
    (lmax, lmin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient ascent from the projected uniform portfolio with
/// fixed step `1 / (γ·λ_max + ε)`.
pub fn solve(p: &MvProblem, max_iters: usize, tol: f64) -> Result<MvSolution, MvError> {
    solve_traced(p, max_iters, tol, |_| {})
}

/// As [`solve`], calling `trace` with the objective after every step.
pub fn solve_traced<F: FnMut(f64)>(p: &MvProblem, max_iters: usize, tol: f64, mut trace: F) -> Result<MvSolution, MvError> {
    p.validate()?;
    let n = p.n();
    let (lmax, lmin) = eigen_bounds(&p.sigma, n);
    if lmin < -PSD_TOL {
        return Err(MvError::NotPsd(lmin));
    }
    let step = 1.0 / (p.gamma * lmax.max(0.0) + STEP_EPS);
    let mut w = simplex_project(&vec![1.0 / n as f64; n], p.w_max)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let sw = matvec(&p.sigma, &w);
        let ascent: Vec<f64> = (0..n).map(|i| w[i] + step * (p.mu_hat[i] - p.gamma * sw[i])).collect();
        let next = simplex_project(&ascent, p.w_max)?;
        let delta = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        iterations += 1;
        trace(p.objective(&w));
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(MvSolution {
        objective: p.objective(&w),
        weights: w,
        iterations,
        converged,
    })
}

/// Sample covariance (T−1 denominator) of `rows` (days × n), shrunk toward
/// its own diagonal: `(1−δ)·S + δ·diag(S)`.
pub fn shrunk_covariance(rows: &[&[f64]], shrinkage: f64) -> Result<Vec<f64>, MvError> {
    let t = rows.len();
    if t < 2 {
        return Err(MvError::Invalid(format!("covariance needs ≥ 2 days, got {t}")));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(MvError::Invalid("ragged return rows".into()));
    }
    let mean: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / t as f64).collect();
    let mut s = vec![0.0; n * n];
    for r in rows {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in 0..=i {
                s[i * n + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let v = s[i * n + j] / (t - 1) as f64;
            let v = if i == j { v } else { (1.0 - shrinkage) * v };
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Ok(s)
}
