//! Guides: auxiliary losses attached to intermediate stages. Each guide maps
//! its stage's representation to one scalar per (day, instrument) through a
//! linear head and scores it against a goal derived from forward returns.

mod losses;

pub use losses::{
    loss_clf, loss_ic, loss_mse, loss_rank, loss_xs_return, median_split_labels, sample_rank_pairs, PhasedGoal, IC_EPS,
};

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::WindowBatch;
use crate::diff::{DiffError, Graph, NodeId, ParamStore};
use crate::stages::{Binder, Stage, StageOutputs};
use crate::tensor::Tensor;

pub const DEFAULT_PAIRS_PER_DAY: usize = 32;

#[derive(Debug, Error)]
pub enum GuideError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid guide: {0}")]
    Spec(String),
    #[error("guide placement `{0}` is not a stage a guide can attach to")]
    UnknownPlacement(String),
    #[error("duplicate guide {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Identity,
    LinearScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ic,
    Mse,
    Clf,
    Rank,
    XsReturn,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Ic, LossKind::Mse, LossKind::Clf, LossKind::Rank, LossKind::XsReturn];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ic => "ic",
            LossKind::Mse => "mse",
            LossKind::Clf => "clf",
            LossKind::Rank => "rank",
            LossKind::XsReturn => "xs_return",
        }
    }
}

/// Where a guide's target values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSource {
    /// Realized next-day return of each instrument.
    #[default]
    ForwardReturn,
}

impl GoalSource {
    pub fn extract(self, batch: &WindowBatch) -> Result<PhasedGoal, DiffError> {
        match self {
            GoalSource::ForwardReturn => PhasedGoal::new(batch.labels.clone(), batch.mask.clone()),
        }
    }
}

fn default_head() -> HeadKind {
    HeadKind::LinearScalar
}

fn default_pairs() -> usize {
    DEFAULT_PAIRS_PER_DAY
}

/// One guide as written in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideSpec {
    pub placement: Stage,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(rename = "loss")]
    pub loss_kind: LossKind,
    pub lambda: f64,
    #[serde(default)]
    pub goal: GoalSource,
    #[serde(default = "default_pairs")]
    pub pairs_per_day: usize,
}

impl GuideSpec {
    pub fn new(placement: Stage, loss_kind: LossKind, lambda: f64) -> Self {
        Self {
            placement,
            head: HeadKind::LinearScalar,
            loss_kind,
            lambda,
            goal: GoalSource::ForwardReturn,
            pairs_per_day: DEFAULT_PAIRS_PER_DAY,
        }
    }

    /// `placement/loss`, unique within a guide list.
    pub fn name(&self) -> String {
        format!("{}/{}", self.placement.name(), self.loss_kind.name())
    }

    /// Parameter prefix of this guide's head.
    pub fn prefix(&self) -> String {
        format!("guide.{}.{}", self.placement.name(), self.loss_kind.name())
    }

    pub fn validate(&self) -> Result<(), GuideError> {
        if self.placement == Stage::Positions {
            return Err(GuideError::UnknownPlacement(self.placement.name().into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(GuideError::Spec(format!("{}: lambda must be finite and ≥ 0, got {}", self.name(), self.lambda)));
        }
        if self.head == HeadKind::Identity {
            return Err(GuideError::Spec(format!(
                "{}: identity head would feed a vector representation to a scalar loss",
                self.name()
            )));
        }
        if self.loss_kind == LossKind::Rank && self.pairs_per_day == 0 {
            return Err(GuideError::Spec(format!("{}: pairs_per_day must be ≥ 1", self.name())));
        }
        Ok(())
    }
}

/// Validated guide list, in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Guides {
    specs: Vec<GuideSpec>,
}

impl Guides {
    pub fn specs(&self) -> &[GuideSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    /// Checks a guide list without touching any parameters.
    pub fn validate(specs: &[GuideSpec]) -> Result<Self, GuideError> {
        let mut seen = BTreeSet::new();
        for s in specs {
            s.validate()?;
            if !seen.insert((s.placement, s.loss_kind)) {
                return Err(GuideError::Duplicate(s.name()));
            }
        }
        Ok(Self { specs: specs.to_vec() })
    }
}

/// Registers a d → 1 head per guide in `params` and returns the validated
/// list. An empty list leaves `params` untouched.
pub fn attach(params: &mut ParamStore, d_model: usize, specs: &[GuideSpec]) -> Result<Guides, GuideError> {
    let guides = Guides::validate(specs)?;
    for s in &guides.specs {
        let prefix = s.prefix();
        params.init_uniform(&format!("{prefix}.w"), &[d_model, 1], d_model)?;
        params.init_uniform(&format!("{prefix}.b"), &[1], d_model)?;
    }
    Ok(guides)
}

/// Applies a guide's head to its stage output, giving (T' × n).
pub fn phased_output(g: &mut Graph, p: &Binder, spec: &GuideSpec, outputs: &StageOutputs) -> Result<NodeId, GuideError> {
    let mut h = outputs.get(spec.placement);
    if spec.placement == Stage::Embedding {
        // (T' × n × W × d): pool over the lookback first
        h = g.mean(h, 2)?;
    }
    let prefix = spec.prefix();
    let w = p.bind(g, &format!("{prefix}.w"))?;
    let b = p.bind(g, &format!("{prefix}.b"))?;
    let y = g.matmul(h, w)?;
    let y = g.add(y, b)?;
    let shape = g.shape(y).to_vec();
    Ok(g.reshape(y, &shape[..shape.len() - 1])?)
}

/// Loss of one guide, dispatching on its kind. `None` means the loss had no
/// usable data (a rank guide with no valid pair).
pub fn guided_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    spec: &GuideSpec,
    c: NodeId,
    goal: &PhasedGoal,
    rng: &mut R,
) -> Result<(Option<NodeId>, usize), DiffError> {
    Ok(match spec.loss_kind {
        LossKind::Ic => {
            let (l, degenerate) = loss_ic(g, c, goal)?;
            (Some(l), degenerate)
        }
        LossKind::Mse => (Some(loss_mse(g, c, goal)?), 0),
        LossKind::Clf => (Some(loss_clf(g, c, goal)?), 0),
        LossKind::Rank => (loss_rank(g, c, goal, spec.pairs_per_day, rng)?, 0),
        LossKind::XsReturn => (Some(loss_xs_return(g, c, goal)?), 0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideTerm {
    pub name: String,
    pub lambda: f64,
    pub loss: NodeId,
    /// Days that contributed nothing (degenerate IC days).
    pub skipped_days: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuideEvaluation {
    pub terms: Vec<GuideTerm>,
    /// Σ λ·loss in declaration order; `None` when there are no terms.
    pub weighted: Option<NodeId>,
}

/// Builds every guide's head and loss on top of an existing forward pass.
/// The rng is used only by rank guides.
pub fn evaluate_guides<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Binder,
    guides: &Guides,
    outputs: &StageOutputs,
    batch: &WindowBatch,
    rng: &mut R,
) -> Result<GuideEvaluation, GuideError> {
    let mut eval = GuideEvaluation::default();
    for spec in &guides.specs {
        let c = phased_output(g, p, spec, outputs)?;
        let goal = spec.goal.extract(batch)?;
        let (loss, skipped_days) = guided_loss(g, spec, c, &goal, rng)?;
        let loss = match loss {
            Some(l) => l,
            None => g.constant(Tensor::scalar(0.0)),
        };
        let term = g.scale(loss, spec.lambda)?;
        eval.weighted = Some(match eval.weighted {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        eval.terms.push(GuideTerm {
            name: spec.name(),
            lambda: spec.lambda,
            loss,
            skipped_days,
        });
    }
    Ok(eval)
}

#[cfg(test)]
mod tests;
