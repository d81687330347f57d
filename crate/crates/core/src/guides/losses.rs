//! Guided losses over per-(day, instrument) phased outputs `c` (T' × n)
//! against constant goals `y` with an inclusion mask. Excluded entries
//! receive exactly zero gradient.

use rand::seq::index::sample;
use rand::Rng;

use crate::diff::{DiffError, Graph, NodeId};
use crate::tensor::Tensor;

/// ε added inside the square root of the IC denominator.
pub const IC_EPS: f64 = 1e-12;

/// Offset that removes excluded instruments from a softmax.
const MASK_OFFSET: f64 = -1e9;

/// Goal values with their inclusion mask, both (T' × n).
#[derive(Debug, Clone, PartialEq)]
pub struct PhasedGoal {
    pub y: Tensor,
    pub mask: Vec<bool>,
}

impl PhasedGoal {
    pub fn new(y: Tensor, mask: Vec<bool>) -> Result<Self, DiffError> {
        if y.rank() != 2 || mask.len() != y.numel() {
            return Err(DiffError::Shape {
                op: "phased_goal",
                lhs: y.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok(Self { y, mask })
    }

    /// Every entry included.
    pub fn dense(y: Tensor) -> Result<Self, DiffError> {
        let n = y.numel();
        Self::new(y, vec![true; n])
    }

    pub fn days(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.y.shape()[1]
    }

    fn mask_tensor(&self) -> Tensor {
        let m = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.y.shape().to_vec(), m).expect("mask matches goal")
    }

    fn included(&self, day: usize) -> Vec<usize> {
        let n = self.width();
        (0..n).filter(|&i| self.mask[day * n + i]).collect()
    }
}

fn check(g: &Graph, c: NodeId, goal: &PhasedGoal, op: &'static str) -> Result<(), DiffError> {
    if g.shape(c) != goal.y.shape() {
        return Err(DiffError::Shape {
            op,
            lhs: g.shape(c).to_vec(),
            rhs: goal.y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Negative mean daily Pearson correlation between `c` and `y` over included
/// instruments. Days with fewer than two included instruments or a constant
/// goal contribute 0; their count is returned alongside the loss node.
pub fn loss_ic(g: &mut Graph, c: NodeId, goal: &PhasedGoal) -> Result<(NodeId, usize), DiffError> {
    check(g, c, goal, "loss_ic")?;
    let (t, n) = (goal.days(), goal.width());
    // day-major columns so per-day statistics broadcast as a trailing suffix
    let mut y_hat = vec![0.0; n * t];
    let mut m = vec![0.0; n * t];
    let mut inv_count = vec![0.0; t];
    let mut degenerate = 0;
    for d in 0..t {
        let idx = goal.included(d);
        let ys: Vec<f64> = idx.iter().map(|&i| goal.y.data()[d * n + i]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
        let norm = ys.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
        if idx.len() < 2 || norm == 0.0 {
            degenerate += 1;
            continue;
        }
        inv_count[d] = 1.0 / idx.len() as f64;
        for (&i, v) in idx.iter().zip(&ys) {
            y_hat[i * t + d] = (v - mean) / norm;
            m[i * t + d] = 1.0;
        }
    }
    let ct = g.transpose(c, &[1, 0])?;
    let m = g.constant(Tensor::new(vec![n, t], m)?);
    let y_hat = g.constant(Tensor::new(vec![n, t], y_hat)?);
    let inv_count = g.constant(Tensor::vector(inv_count));

    let cm = g.mul(ct, m)?;
    let sum = g.sum(cm, 0)?;
    let mean = g.mul(sum, inv_count)?;
    let centered = g.sub(ct, mean)?;
    let dc = g.mul(centered, m)?;
    let prod = g.mul(dc, y_hat)?;
    let cov = g.sum(prod, 0)?;
    let sq = g.square(dc)?;
    let var = g.sum(sq, 0)?;
    let var = g.offset(var, IC_EPS)?;
    let den = g.sqrt(var)?;
    let corr = g.div(cov, den)?;
    let mean_corr = g.mean(corr, 0)?;
    Ok((g.neg(mean_corr)?, degenerate))
}

/// Mean squared error over included entries.
pub fn loss_mse(g: &mut Graph, c: NodeId, goal: &PhasedGoal) -> Result<NodeId, DiffError> {
    check(g, c, goal, "loss_mse")?;
    let count = goal.mask.iter().filter(|&&b| b).count().max(1);
    let y = g.constant(goal.y.clone());
    let m = g.constant(goal.mask_tensor());
    let diff = g.sub(c, y)?;
    let diff = g.mul(diff, m)?;
    let sq = g.square(diff)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / count as f64)
}

/// 1 where `y` is strictly above its day's median over included entries.
pub fn median_split_labels(goal: &PhasedGoal) -> Vec<f64> {
    let (t, n) = (goal.days(), goal.width());
    let mut labels = vec![0.0; t * n];
    for d in 0..t {
        let idx = goal.included(d);
        if idx.is_empty() {
            continue;
        }
        let mut ys: Vec<f64> = idx.iter().map(|&i| goal.y.data()[d * n + i]).collect();
        ys.sort_by(|a, b| a.total_cmp(b));
        let k = ys.len();
        let median = if k % 2 == 1 { ys[k / 2] } else { 0.5 * (ys[k / 2 - 1] + ys[k / 2]) };
        for &i in &idx {
            if goal.y.data()[d * n + i] > median {
                labels[d * n + i] = 1.0;
            }
        }
    }
    labels
}

/// Mean binary cross-entropy of `sigmoid(c)` against median-split labels,
/// written as `softplus(c) − label·c`.
pub fn loss_clf(g: &mut Graph, c: NodeId, goal: &PhasedGoal) -> Result<NodeId, DiffError> {
    check(g, c, goal, "loss_clf")?;
    let count = goal.mask.iter().filter(|&&b| b).count().max(1);
    let labels = g.constant(Tensor::new(goal.y.shape().to_vec(), median_split_labels(goal))?);
    let m = g.constant(goal.mask_tensor());
    let sp = g.softplus(c)?;
    let lc = g.mul(labels, c)?;
    let bce = g.sub(sp, lc)?;
    let bce = g.mul(bce, m)?;
    let total = g.sum_all(bce)?;
    g.scale(total, 1.0 / count as f64)
}

/// Ordered pairs `(i, j)` of flat indices with `y_i > y_j`, up to
/// `pairs_per_day` per day, sampled without replacement.
pub fn sample_rank_pairs<R: Rng + ?Sized>(goal: &PhasedGoal, pairs_per_day: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let n = goal.width();
    let y = goal.y.data();
    let mut out = Vec::new();
    for d in 0..goal.days() {
        let idx = goal.included(d);
        let mut valid = Vec::new();
        for &a in &idx {
            for &b in &idx {
                if y[d * n + a] > y[d * n + b] {
                    valid.push((d * n + a, d * n + b));
                }
            }
        }
        if valid.is_empty() {
            continue;
        }
        let k = pairs_per_day.min(valid.len());
        let mut picked: Vec<usize> = sample(rng, valid.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|p| valid[p]));
    }
    out
}

/// Mean pairwise logistic loss `log(1 + exp(−(c_i − c_j)))` over sampled
/// pairs with `y_i > y_j`. Returns `None` when no day has a valid pair.
pub fn loss_rank<R: Rng + ?Sized>(
    g: &mut Graph,
    c: NodeId,
    goal: &PhasedGoal,
    pairs_per_day: usize,
    rng: &mut R,
) -> Result<Option<NodeId>, DiffError> {
    check(g, c, goal, "loss_rank")?;
    let pairs = sample_rank_pairs(goal, pairs_per_day, rng);
    if pairs.is_empty() {
        return Ok(None);
    }
    let flat = g.reshape(c, &[goal.days() * goal.width()])?;
    let hi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let lo: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ci = g.index_select(flat, 0, &hi)?;
    let cj = g.index_select(flat, 0, &lo)?;
    let margin = g.sub(cj, ci)?;
    let l = g.softplus(margin)?;
    Ok(Some(g.mean(l, 0)?))
}

/// Negative mean daily return of the softmax(c) portfolio over included
/// instruments.
pub fn loss_xs_return(g: &mut Graph, c: NodeId, goal: &PhasedGoal) -> Result<NodeId, DiffError> {
    check(g, c, goal, "loss_xs_return")?;
    let offset: Vec<f64> = goal.mask.iter().map(|&b| if b { 0.0 } else { MASK_OFFSET }).collect();
    let y_masked: Vec<f64> = goal
        .y
        .data()
        .iter()
        .zip(&goal.mask)
        .map(|(&v, &b)| if b { v } else { 0.0 })
        .collect();
    let shape = goal.y.shape().to_vec();
    let offset = g.constant(Tensor::new(shape.clone(), offset)?);
    let y = g.constant(Tensor::new(shape, y_masked)?);
    let logits = g.add(c, offset)?;
    let w = g.softmax(logits, 1)?;
    let wy = g.mul(w, y)?;
    let day = g.sum(wy, 1)?;
    let mean = g.mean(day, 0)?;
    g.neg(mean)
}
