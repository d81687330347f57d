//! Portfolio returns, the Sharpe utility and the composite training loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::WindowBatch;
use crate::diff::{DiffError, Graph, NodeId};
use crate::guides::GuideEvaluation;
use crate::tensor::Tensor;

/// Trading days per year used for annualization.
pub const TRADING_DAYS: f64 = 238.0;
/// Guard on the standard deviation: σ is replaced by √(σ² + ε²).
pub const SHARPE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `r_t = Σ_i positions[t,i]·returns[t,i] − benchmark[t]`, shape (T').
pub fn portfolio_returns(g: &mut Graph, positions: NodeId, returns: &Tensor, benchmark: &[f64]) -> Result<NodeId, ObjectiveError> {
    let shape = g.shape(positions).to_vec();
    if shape != returns.shape() || shape.len() != 2 || benchmark.len() != shape[0] {
        return Err(ObjectiveError::Invalid(format!(
            "positions {shape:?}, returns {:?} and benchmark of length {} disagree",
            returns.shape(),
            benchmark.len()
        )));
    }
    let r = g.constant(returns.clone());
    let b = g.constant(Tensor::vector(benchmark.to_vec()));
    let pr = g.mul(positions, r)?;
    let gross = g.sum(pr, 1)?;
    Ok(g.sub(gross, b)?)
}

/// Annualized Sharpe ratio of a (T') series of excess returns:
/// `√238 · μ / √(σ² + ε²)` with the sample (T'−1) variance.
pub fn sharpe_utility(g: &mut Graph, r: NodeId) -> Result<NodeId, ObjectiveError> {
    let shape = g.shape(r).to_vec();
    if shape.len() != 1 || shape[0] < 2 {
        return Err(ObjectiveError::Invalid(format!(
            "sharpe needs a series of at least 2 days, got shape {shape:?}"
        )));
    }
    let t = shape[0] as f64;
    let mu = g.mean(r, 0)?;
    let d = g.sub(r, mu)?;
    let sq = g.square(d)?;
    let ss = g.sum_all(sq)?;
    let var = g.scale(ss, 1.0 / (t - 1.0))?;
    let var = g.offset(var, SHARPE_EPS * SHARPE_EPS)?;
    let sd = g.sqrt(var)?;
    let ratio = g.div(mu, sd)?;
    Ok(g.scale(ratio, TRADING_DAYS.sqrt())?)
}

/// Mean and sample standard deviation, computed in the same order as the
/// graph version.
pub fn mean_std(r: &[f64]) -> (f64, f64) {
    let t = r.len() as f64;
    let mu = r.iter().sum::<f64>() / t;
    let ss: f64 = r.iter().map(|v| (v - mu) * (v - mu)).sum();
    (mu, (ss * (1.0 / (t - 1.0))).sqrt())
}

/// Plain-number twin of [`sharpe_utility`]. Needs at least 2 values.
pub fn sharpe_value(r: &[f64]) -> f64 {
    let t = r.len() as f64;
    let mu = r.iter().sum::<f64>() / t;
    let ss: f64 = r.iter().map(|v| (v - mu) * (v - mu)).sum();
    let var = ss * (1.0 / (t - 1.0)) + SHARPE_EPS * SHARPE_EPS;
    mu / var.sqrt() * TRADING_DAYS.sqrt()
}

/// True when the ε guard, not the data, sets the Sharpe denominator.
pub fn sharpe_guard_dominated(r: &[f64]) -> bool {
    mean_std(r).1 < SHARPE_EPS
}

/// Mean daily turnover `Σ_i |w_t,i − w_{t−1},i|` over a (T' × n) position
/// block. Zero for a single day.
pub fn turnover(g: &mut Graph, positions: NodeId) -> Result<NodeId, ObjectiveError> {
    let t = g.shape(positions)[0];
    if t < 2 {
        return Ok(g.scalar(0.0));
    }
    let next = g.slice(positions, 0, 1, t)?;
    let prev = g.slice(positions, 0, 0, t - 1)?;
    let d = g.sub(next, prev)?;
    let a = g.abs(d)?;
    let s = g.sum_all(a)?;
    Ok(g.scale(s, 1.0 / (t - 1) as f64)?)
}

/// Excess returns and Sharpe utility of positions over a training window,
/// against the subset's equal-weight benchmark.
pub fn window_utility(g: &mut Graph, positions: NodeId, batch: &WindowBatch) -> Result<(NodeId, NodeId), ObjectiveError> {
    let r = portfolio_returns(g, positions, &batch.labels, &batch.subset_benchmark())?;
    let u = sharpe_utility(g, r)?;
    Ok((r, u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub total: NodeId,
    pub utility: NodeId,
    /// (name, λ, loss) in declaration order.
    pub guide_terms: Vec<(String, f64, NodeId)>,
    pub turnover: Option<(f64, NodeId)>,
}

/// `total = Σ λ_i·L_i − U (+ κ·turnover)`, summed in declaration order.
/// With no guides the total is `−U`.
pub fn compose(
    g: &mut Graph,
    guides: &GuideEvaluation,
    utility: NodeId,
    turnover: Option<(f64, NodeId)>,
) -> Result<CompositeLoss, ObjectiveError> {
    for t in &guides.terms {
        if !(t.lambda >= 0.0) {
            return Err(ObjectiveError::Invalid(format!("guide {} has negative λ {}", t.name, t.lambda)));
        }
    }
    let mut total = match guides.weighted {
        Some(w) => g.sub(w, utility)?,
        None => g.neg(utility)?,
    };
    if let Some((kappa, node)) = turnover {
        if !(kappa >= 0.0) {
            return Err(ObjectiveError::Invalid(format!("turnover penalty must be ≥ 0, got {kappa}")));
        }
        let pen = g.scale(node, kappa)?;
        total = g.add(total, pen)?;
    }
    Ok(CompositeLoss {
        total,
        utility,
        guide_terms: guides.terms.iter().map(|t| (t.name.clone(), t.lambda, t.loss)).collect(),
        turnover,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideRecord {
    pub name: String,
    pub lambda: f64,
    pub loss: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub guides: Vec<GuideRecord>,
    pub utility: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turnover: Option<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub guard_dominated: bool,
}

impl LossRecord {
    /// Reads the evaluated components of `loss` out of `g`.
    pub fn from_graph(g: &mut Graph, iteration: usize, loss: &CompositeLoss) -> Result<Self, ObjectiveError> {
        let scalar = |g: &mut Graph, id| -> Result<f64, ObjectiveError> { Ok(g.forward(id)?[0]) };
        let total = scalar(g, loss.total)?;
        let utility = scalar(g, loss.utility)?;
        let mut guides = Vec::with_capacity(loss.guide_terms.len());
        for (name, lambda, id) in &loss.guide_terms {
            guides.push(GuideRecord {
                name: name.clone(),
                lambda: *lambda,
                loss: scalar(g, *id)?,
            });
        }
        let turnover = match loss.turnover {
            Some((_, id)) => Some(scalar(g, id)?),
            None => None,
        };
        Ok(Self {
            iteration,
            guides,
            utility,
            turnover,
            total,
            guard_dominated: false,
        })
    }
}

/// JSON-lines writer for [`LossRecord`]s.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self, ObjectiveError> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, record: &LossRecord) -> Result<(), ObjectiveError> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), ObjectiveError> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
