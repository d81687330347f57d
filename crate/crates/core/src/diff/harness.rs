//! Finite-difference sweep over every primitive.
//!
//! Each case wraps one primitive as `loss = Σ w ⊙ op(x…)` with a random
//! constant weighting `w`, draws inputs from a domain that avoids the
//! primitive's non-differentiable points, and runs [`grad_check`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grad_check, DiffError, GradCheckOptions, Graph, Mode, NodeId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
enum Domain {
    Uniform,
    Positive,
    AwayFromZero,
    /// Keeps a margin around the clip bounds ±0.5.
    AwayFromClip,
}

impl Domain {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Uniform => rng.random_range(-2.0..2.0),
            Domain::Positive => rng.random_range(0.2..3.0),
            Domain::AwayFromZero | Domain::AwayFromClip => {
                let edge = if matches!(self, Domain::AwayFromZero) { 0.0 } else { 0.5 };
                loop {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    if (v.abs() - edge).abs() > 0.05 && v.abs() > 0.05 {
                        return v;
                    }
                }
            }
        }
    }
}

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>;

struct Case {
    name: &'static str,
    inputs: &'static [(&'static [usize], Domain)],
    mode: Mode,
    build: Build,
}

use Domain::*;

const CASES: &[Case] = &[
    Case { name: "add", inputs: &[(&[3, 4], Uniform), (&[3, 4], Uniform)], mode: Mode::Eval, build: |g, x| g.add(x[0], x[1]) },
    Case { name: "add_suffix_broadcast", inputs: &[(&[2, 3, 4], Uniform), (&[4], Uniform)], mode: Mode::Eval, build: |g, x| g.add(x[0], x[1]) },
    Case { name: "sub_scalar_broadcast", inputs: &[(&[5], Uniform), (&[], Uniform)], mode: Mode::Eval, build: |g, x| g.sub(x[0], x[1]) },
    Case { name: "mul", inputs: &[(&[3, 4], Uniform), (&[4], Uniform)], mode: Mode::Eval, build: |g, x| g.mul(x[0], x[1]) },
    Case { name: "div", inputs: &[(&[3, 4], Uniform), (&[3, 4], Positive)], mode: Mode::Eval, build: |g, x| g.div(x[0], x[1]) },
    Case { name: "scale", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.scale(x[0], -1.7) },
    Case { name: "offset", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.offset(x[0], 0.3) },
    Case { name: "neg", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.neg(x[0]) },
    Case { name: "matmul", inputs: &[(&[2, 3, 4], Uniform), (&[4, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.matmul(x[0], x[1]) },
    Case { name: "matmul_batched", inputs: &[(&[2, 3, 4], Uniform), (&[2, 4, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.matmul(x[0], x[1]) },
    Case { name: "transpose", inputs: &[(&[2, 3, 4], Uniform)], mode: Mode::Eval, build: |g, x| g.transpose(x[0], &[2, 0, 1]) },
    Case { name: "reshape", inputs: &[(&[2, 6], Uniform)], mode: Mode::Eval, build: |g, x| g.reshape(x[0], &[3, 4]) },
    Case { name: "slice", inputs: &[(&[3, 5, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.slice(x[0], 1, 1, 4) },
    Case { name: "concat", inputs: &[(&[2, 3], Uniform), (&[2, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.concat(&[x[0], x[1]], 1) },
    Case { name: "index_select", inputs: &[(&[4, 3], Uniform)], mode: Mode::Eval, build: |g, x| g.index_select(x[0], 0, &[3, 0, 3, 1]) },
    Case { name: "sum", inputs: &[(&[3, 4, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.sum(x[0], 1) },
    Case { name: "mean", inputs: &[(&[3, 4, 2], Uniform)], mode: Mode::Eval, build: |g, x| g.mean(x[0], 2) },
    Case { name: "std", inputs: &[(&[3, 5], Uniform)], mode: Mode::Eval, build: |g, x| g.std(x[0], 1) },
    Case { name: "sum_all", inputs: &[(&[3, 4], Uniform)], mode: Mode::Eval, build: |g, x| g.sum_all(x[0]) },
    Case { name: "mean_all", inputs: &[(&[3, 4], Uniform)], mode: Mode::Eval, build: |g, x| g.mean_all(x[0]) },
    Case { name: "square", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.square(x[0]) },
    Case { name: "sqrt", inputs: &[(&[6], Positive)], mode: Mode::Eval, build: |g, x| g.sqrt(x[0]) },
    Case { name: "exp", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.exp(x[0]) },
    Case { name: "log", inputs: &[(&[6], Positive)], mode: Mode::Eval, build: |g, x| g.log(x[0]) },
    Case { name: "tanh", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.tanh(x[0]) },
    Case { name: "sigmoid", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.sigmoid(x[0]) },
    Case { name: "relu", inputs: &[(&[6], AwayFromZero)], mode: Mode::Eval, build: |g, x| g.relu(x[0]) },
    Case { name: "softplus", inputs: &[(&[6], Uniform)], mode: Mode::Eval, build: |g, x| g.softplus(x[0]) },
    Case { name: "abs", inputs: &[(&[6], AwayFromZero)], mode: Mode::Eval, build: |g, x| g.abs(x[0]) },
    Case { name: "softmax", inputs: &[(&[3, 5], Uniform)], mode: Mode::Eval, build: |g, x| g.softmax(x[0], 1) },
    Case { name: "softmax_leading_axis", inputs: &[(&[4, 3], Uniform)], mode: Mode::Eval, build: |g, x| g.softmax(x[0], 0) },
    Case { name: "dropout", inputs: &[(&[4, 4], Uniform)], mode: Mode::Train, build: |g, x| g.dropout(x[0], 0.3) },
    Case { name: "layer_norm", inputs: &[(&[3, 6], Uniform)], mode: Mode::Eval, build: |g, x| g.layer_norm(x[0], 1e-5) },
    Case { name: "pearson_corr", inputs: &[(&[3, 6], Uniform), (&[3, 6], Uniform)], mode: Mode::Eval, build: |g, x| g.pearson_corr(x[0], x[1], 1) },
    Case { name: "clip", inputs: &[(&[8], AwayFromClip)], mode: Mode::Eval, build: |g, x| g.clip(x[0], -0.5, 0.5) },
];

/// Worst-case result for one primitive across all sampled inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCheck {
    pub primitive: String,
    pub inputs_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs every primitive case on `n_inputs` seeded random inputs.
pub fn check_primitives(n_inputs: usize, seed: u64, opts: GradCheckOptions) -> Result<Vec<PrimitiveCheck>, DiffError> {
    let mut out = Vec::with_capacity(CASES.len());
    for (ci, case) in CASES.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut passed = true;
        for k in 0..n_inputs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 32) ^ k as u64);
            let mut params = ParamStore::new(k as u64);
            for (j, (shape, dom)) in case.inputs.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| dom.draw(&mut rng)).collect();
                params.insert(&format!("x{j}"), Tensor::new(shape.to_vec(), data)?)?;
            }
            let weights_seed: u64 = rng.random();
            let graph_seed: u64 = rng.random();
            let report = grad_check(
                |p| {
                    let mut g = Graph::new(case.mode, graph_seed);
                    let xs = (0..case.inputs.len())
                        .map(|j| g.param(p, &format!("x{j}")))
                        .collect::<Result<Vec<_>, _>>()?;
                    let y = (case.build)(&mut g, &xs)?;
                    let shape = g.shape(y).to_vec();
                    let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
                    let n: usize = shape.iter().product();
                    let w = (0..n).map(|_| wr.random_range(0.5..1.5)).collect();
                    let w = g.constant(Tensor::new(shape, w)?);
                    let prod = g.mul(y, w)?;
                    let loss = g.sum_all(prod)?;
                    Ok((g, loss))
                },
                &params,
                opts,
            )?;
            worst = worst.max(report.max_rel_err());
            passed &= report.passed;
        }
        out.push(PrimitiveCheck {
            primitive: case.name.to_string(),
            inputs_checked: n_inputs,
            max_rel_err: worst,
            passed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let results = check_primitives(100, 11, GradCheckOptions::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{} failed: max rel err {:e}", r.primitive, r.max_rel_err);
        }
        assert_eq!(results.len(), primitive_names().len());
    }
}
