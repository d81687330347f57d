//! Training loops: end-to-end (optionally guided), stage-wise predictive,
//! and the appended-network baseline. All share the optimizer, validation
//! cadence and early stopping.

mod positions;

pub use positions::{mv_positions, model_positions, predict_days, DayPredictions};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::{sample_day, sample_window, window_at, DataError, DayRange, FeaturePanel, ReturnPanel, WindowBatch};
use crate::diff::{DiffError, Graph, Mode, ParamGrads, ParamStore};
use crate::guides::{attach, evaluate_guides, loss_ic, loss_mse, GuideError, GuideSpec, Guides, PhasedGoal};
use crate::backtest::BacktestError;
use crate::mvopt::MvError;
use crate::objective::{
    compose, sharpe_guard_dominated, sharpe_value, turnover, window_utility, GuideRecord, LossLog, LossRecord, ObjectiveError,
};
use crate::stages::{forward_with, init_parts, predict_with, Binder, Model, ModelConfig, Part, StageError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Guide(#[from] GuideError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Mv(#[from] MvError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} on batch {batch}: {components}")]
    NonFinite {
        iteration: usize,
        batch: String,
        components: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: f64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Validation cadence, in epochs.
    pub validate_every: f64,
    /// Iterations per epoch; defaults to the number of training days.
    pub iters_per_epoch: Option<usize>,
    /// Hard cap on iterations, applied after `max_epochs`.
    pub max_iters: Option<usize>,
    /// Days per training window.
    pub horizon: usize,
    /// Fraction of instruments per training window.
    pub window_ratio: f64,
    /// Fraction of tradable instruments per predictive batch.
    pub day_ratio: f64,
    /// Number of fixed validation windows (end-to-end regimes).
    pub valid_windows: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the optional turnover penalty; 0 disables it.
    pub turnover_penalty: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 200.0,
            patience: 10,
            validate_every: 0.5,
            iters_per_epoch: None,
            max_iters: None,
            horizon: 22,
            window_ratio: 0.1,
            day_ratio: 0.8,
            valid_windows: 8,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            turnover_penalty: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.max_epochs > 0.0) || !(self.validate_every > 0.0) {
            return bad("max_epochs and validate_every must be > 0".into());
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be ≥ 2, got {}", self.horizon));
        }
        for (name, r) in [("window_ratio", self.window_ratio), ("day_ratio", self.day_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {r}"));
            }
        }
        if self.valid_windows == 0 || self.patience == 0 {
            return bad("valid_windows and patience must be ≥ 1".into());
        }
        if !(self.clip_norm > 0.0) || !(self.turnover_penalty >= 0.0) {
            return bad("clip_norm must be > 0 and turnover_penalty ≥ 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        if self.iters_per_epoch == Some(0) || self.max_iters == Some(0) {
            return bad("iteration counts must be ≥ 1".into());
        }
        Ok(())
    }

    fn schedule(&self, train_days: usize) -> (usize, usize) {
        let per_epoch = self.iters_per_epoch.unwrap_or(train_days).max(1);
        let mut total = (self.max_epochs * per_epoch as f64).round().max(1.0) as usize;
        if let Some(cap) = self.max_iters {
            total = total.min(cap);
        }
        let every = ((self.validate_every * per_epoch as f64).round() as usize).max(1);
        (total, every)
    }

    fn per_epoch(&self, train_days: usize) -> usize {
        self.iters_per_epoch.unwrap_or(train_days).max(1)
    }
}

/// Chronological train / validation / test day ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: DayRange,
    pub valid: DayRange,
    pub test: DayRange,
}

impl Splits {
    pub fn validate(&self, n_days: usize) -> Result<(), TrainError> {
        let r = [self.train, self.valid, self.test];
        if r.iter().any(|x| x.is_empty()) {
            return Err(TrainError::Config("every split must be non-empty".into()));
        }
        if !(self.train.end <= self.valid.start && self.valid.end <= self.test.start) {
            return Err(TrainError::Config(format!(
                "splits must be disjoint and ordered train < valid < test, got {:?}",
                r.map(|x| (x.start, x.end))
            )));
        }
        if self.test.end > n_days {
            return Err(TrainError::Config(format!("test split ends at {} but the panel has {n_days} days", self.test.end)));
        }
        Ok(())
    }
}

/// A feature panel with its aligned returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeaturePanel,
    pub returns: ReturnPanel,
}

impl Dataset {
    pub fn new(features: FeaturePanel, returns: ReturnPanel) -> Result<Self, TrainError> {
        returns.check_aligned(&features)?;
        if let Some(k) = features.data().iter().position(|v| !v.is_finite()) {
            let [_, n, w, f] = features.dims();
            let block = n * w * f;
            return Err(TrainError::Config(format!(
                "feature panel has a non-finite value on day {}, instrument {}; preprocess it first",
                k / block,
                k % block / (w * f)
            )));
        }
        Ok(Self { features, returns })
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Independent 64-bit seed for (`seed`, `stream`, `index`).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_RANK: u64 = 3;
const STREAM_VALID: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran the full iteration budget.
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub epoch: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Index into `validations` of the restored parameters.
    pub best: usize,
    pub stop_reason: StopReason,
    pub iterations: usize,
}

impl TrainHistory {
    pub fn best_metric(&self) -> f64 {
        self.validations[self.best].metric
    }

    pub fn best_epoch(&self) -> f64 {
        self.validations[self.best].epoch
    }

    pub fn totals(&self) -> Vec<f64> {
        self.losses.iter().map(|r| r.total).collect()
    }
}

/// Best-so-far tracking with patience counted in validations.
struct EarlyStop {
    patience: usize,
    best: Option<(usize, f64, ParamStore)>,
    since_best: usize,
    records: Vec<ValidationRecord>,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
            records: Vec::new(),
        }
    }

    /// Records a validation; returns true when training should stop.
    fn observe(&mut self, iteration: usize, epoch: f64, metric: f64, params: &ParamStore) -> bool {
        let idx = self.records.len();
        self.records.push(ValidationRecord { iteration, epoch, metric });
        let score = if metric.is_nan() { f64::NEG_INFINITY } else { metric };
        let improved = match &self.best {
            None => true,
            Some((_, best, _)) => score > *best,
        };
        if improved {
            self.best = Some((idx, score, params.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    fn finish(self, params: &mut ParamStore, losses: Vec<LossRecord>, stop_reason: StopReason, iterations: usize) -> TrainHistory {
        let (best, _, best_params) = self.best.expect("at least one validation");
        *params = best_params;
        TrainHistory {
            losses,
            validations: self.records,
            best,
            stop_reason,
            iterations,
        }
    }
}

fn check_finite(grads: &ParamGrads) -> Option<String> {
    grads
        .iter()
        .find(|(_, t)| !t.is_finite())
        .map(|(name, _)| format!("non-finite gradient for `{name}`"))
}

/// Start offsets of up to `count` non-overlapping `horizon`-day windows in
/// `range`, chosen with a fixed seed and returned in order.
pub fn validation_windows(range: DayRange, horizon: usize, count: usize, seed: u64) -> Vec<usize> {
    let slots = range.len() / horizon;
    let mut picked: Vec<usize> = if slots <= count {
        (0..slots).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_VALID, 0));
        rand::seq::index::sample(&mut rng, slots, count).into_vec()
    };
    picked.sort_unstable();
    picked.into_iter().map(|s| range.start + s * horizon).collect()
}

/// Mean Sharpe utility of eval-mode positions over fixed windows covering
/// every instrument.
pub fn validation_sharpe(p: &Binder, cfg: &ModelConfig, data: &Dataset, starts: &[usize], horizon: usize) -> Result<f64, TrainError> {
    let all: Vec<usize> = (0..data.features.n_instruments()).collect();
    let mut total = 0.0;
    for &s in starts {
        let batch = window_at(&data.features, &data.returns, s, horizon, &all)?;
        let mut g = Graph::new(Mode::Eval, 0);
        let out = forward_with(&mut g, p, cfg, &batch.features)?;
        let (r, _) = window_utility(&mut g, out.positions, &batch)?;
        total += sharpe_value(g.forward(r)?);
    }
    Ok(total / starts.len() as f64)
}

fn describe_window(b: &WindowBatch) -> String {
    format!(
        "window days {}..={} instruments {:?}",
        b.day_ids.first().copied().unwrap_or_default(),
        b.day_ids.last().copied().unwrap_or_default(),
        b.indices
    )
}

/// Window-based training on the Sharpe utility plus guides. Parameters found
/// in `frozen` receive no updates.
fn train_windows(
    trainable: &mut ParamStore,
    frozen: Option<&ParamStore>,
    model_cfg: &ModelConfig,
    guides: &Guides,
    data: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    mut log: Option<&mut LossLog>,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    splits.validate(data.features.n_days())?;
    if splits.train.len() < cfg.horizon {
        return Err(TrainError::Config(format!(
            "training split has {} days, fewer than the {}-day horizon",
            splits.train.len(),
            cfg.horizon
        )));
    }
    let valid_h = cfg.horizon.min(splits.valid.len());
    if valid_h < 2 {
        return Err(TrainError::Config("validation split needs at least 2 days".into()));
    }
    let starts = validation_windows(splits.valid, valid_h, cfg.valid_windows, cfg.seed);
    let (total_iters, every) = cfg.schedule(splits.train.len());
    let per_epoch = cfg.per_epoch(splits.train.len()) as f64;

    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLER, 0));
    let mut adam = Adam::from_config(cfg);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut losses = Vec::with_capacity(total_iters);
    let mut reason = StopReason::Completed;
    let mut done = 0;

    for it in 0..total_iters {
        let batch = sample_window(&data.features, &data.returns, splits.train, cfg.horizon, cfg.window_ratio, &mut sampler)?;
        let binder = match frozen {
            Some(f) => Binder::with_frozen(trainable, f),
            None => Binder::new(trainable),
        };
        let mut g = Graph::new(Mode::Train, derive_seed(cfg.seed, STREAM_DROPOUT, it as u64));
        let out = forward_with(&mut g, &binder, model_cfg, &batch.features)?;
        let mut rank_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_RANK, it as u64));
        let eval = evaluate_guides(&mut g, &binder, guides, &out, &batch, &mut rank_rng)?;
        let (r, u) = window_utility(&mut g, out.positions, &batch)?;
        let to = if cfg.turnover_penalty > 0.0 {
            Some((cfg.turnover_penalty, turnover(&mut g, out.positions)?))
        } else {
            None
        };
        let loss = compose(&mut g, &eval, u, to)?;

        let record = match g.forward(loss.total) {
            Ok(_) => {
                let mut rec = LossRecord::from_graph(&mut g, it, &loss)?;
                rec.guard_dominated = sharpe_guard_dominated(g.forward(r)?);
                rec
            }
            Err(DiffError::NonFinite { node, op }) => {
                let mut parts = vec![format!("node {node} ({op})")];
                for (name, _, id) in &loss.guide_terms {
                    parts.push(format!("{name}={}", fmt_component(g.forward(*id).map(|v| v[0]))));
                }
                parts.push(format!("utility={}", fmt_component(g.forward(loss.utility).map(|v| v[0]))));
                return Err(TrainError::NonFinite {
                    iteration: it,
                    batch: describe_window(&batch),
                    components: parts.join(", "),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let mut grads = g.grad_backward(loss.total, trainable)?;
        if let Some(msg) = check_finite(&grads) {
            return Err(TrainError::NonFinite {
                iteration: it,
                batch: describe_window(&batch),
                components: msg,
            });
        }
        grads.clip_global_norm(cfg.clip_norm);
        adam.step(trainable, &grads);
        if let Some(log) = log.as_deref_mut() {
            log.append(&record)?;
        }
        losses.push(record);
        done = it + 1;

        if done % every == 0 || done == total_iters {
            let binder = match frozen {
                Some(f) => Binder::with_frozen(trainable, f),
                None => Binder::new(trainable),
            };
            let metric = validation_sharpe(&binder, model_cfg, data, &starts, valid_h)?;
            if stop.observe(done, done as f64 / per_epoch, metric, trainable) {
                reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if let Some(log) = log {
        log.flush()?;
    }
    Ok(stop.finish(trainable, losses, reason, done))
}

fn fmt_component(v: Result<f64, DiffError>) -> String {
    match v {
        Ok(x) => format!("{x}"),
        Err(_) => "non-finite".into(),
    }
}

/// A model plus the guides whose heads live in its parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedModel {
    pub model: Model,
    pub guides: Guides,
}

impl GuidedModel {
    pub fn new(config: ModelConfig, n_features: usize, lookback: usize, specs: &[GuideSpec]) -> Result<Self, TrainError> {
        let mut model = Model::new(config, n_features, lookback)?;
        let guides = attach(&mut model.params, model.config.d_model, specs)?;
        Ok(Self { model, guides })
    }
}

/// End-to-end training on the Sharpe utility plus the model's guides. The
/// returned model carries the best-validation parameters.
pub fn train_end_to_end(
    mut guided: GuidedModel,
    data: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    log: Option<&mut LossLog>,
) -> Result<(GuidedModel, TrainHistory), TrainError> {
    check_shape(&guided.model, data)?;
    let config = guided.model.config.clone();
    let history = train_windows(&mut guided.model.params, None, &config, &guided.guides, data, splits, cfg, log)?;
    Ok((guided, history))
}

fn check_shape(model: &Model, data: &Dataset) -> Result<(), TrainError> {
    let [_, _, w, f] = data.features.dims();
    if model.n_features != f || model.lookback != w {
        return Err(TrainError::Config(format!(
            "model expects lookback {} × {} features, data has {w} × {f}",
            model.lookback, model.n_features
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictLoss {
    #[default]
    NegIc,
    Mse,
}

impl PredictLoss {
    pub fn name(self) -> &'static str {
        match self {
            PredictLoss::NegIc => "neg_ic",
            PredictLoss::Mse => "mse",
        }
    }
}

/// Embedding and temporal stages with a linear prediction head.
pub fn new_predictor(config: ModelConfig, n_features: usize, lookback: usize) -> Result<Model, TrainError> {
    let mut params = ParamStore::new(config.seed);
    init_parts(&mut params, &config, n_features, lookback, &[Part::Embedding, Part::Temporal, Part::PredictHead])?;
    Ok(Model {
        config,
        n_features,
        lookback,
        params,
    })
}

/// Predictive loss on one cross-section: `loss(ŷ, y)` for (n) predictions.
pub fn predictive_loss(g: &mut Graph, kind: PredictLoss, pred: crate::diff::NodeId, labels: &[f64]) -> Result<crate::diff::NodeId, TrainError> {
    let n = labels.len();
    let c = g.reshape(pred, &[1, n])?;
    let goal = PhasedGoal::dense(Tensor::new(vec![1, n], labels.to_vec())?)?;
    Ok(match kind {
        PredictLoss::NegIc => loss_ic(g, c, &goal)?.0,
        PredictLoss::Mse => loss_mse(g, c, &goal)?,
    })
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Mean daily IC of eval-mode predictions over tradable instruments.
pub fn mean_daily_ic(model: &Model, data: &Dataset, range: DayRange) -> Result<f64, TrainError> {
    let days = predict_days(&Binder::new(&model.params), &model.config, data, range)?;
    let mut total = 0.0;
    let mut count = 0;
    for d in &days {
        let labels: Vec<f64> = d.indices.iter().map(|&i| data.returns.get(d.day, i)).collect();
        if let Some(ic) = pearson(&d.predictions, &labels) {
            total += ic;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Stage-wise training of a predictor on sampled cross-sections. The
/// validation metric is the mean daily IC on the validation split.
pub fn train_predictive(
    mut model: Model,
    data: &Dataset,
    splits: &Splits,
    kind: PredictLoss,
    cfg: &TrainConfig,
    mut log: Option<&mut LossLog>,
) -> Result<(Model, TrainHistory), TrainError> {
    cfg.validate()?;
    splits.validate(data.features.n_days())?;
    check_shape(&model, data)?;
    let (total_iters, every) = cfg.schedule(splits.train.len());
    let per_epoch = cfg.per_epoch(splits.train.len()) as f64;
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLER, 0));
    let mut adam = Adam::from_config(cfg);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut losses = Vec::with_capacity(total_iters);
    let mut reason = StopReason::Completed;
    let mut done = 0;

    for it in 0..total_iters {
        let batch = sample_day(&data.features, &data.returns, splits.train, cfg.day_ratio, &mut sampler)?;
        let mut g = Graph::new(Mode::Train, derive_seed(cfg.seed, STREAM_DROPOUT, it as u64));
        let (pred, _) = predict_with(&mut g, &Binder::new(&model.params), &model.config, &batch.features)?;
        let loss = predictive_loss(&mut g, kind, pred, &batch.labels)?;
        let value = match g.forward(loss) {
            Ok(v) => v[0],
            Err(DiffError::NonFinite { node, op }) => {
                return Err(TrainError::NonFinite {
                    iteration: it,
                    batch: format!("day {} instruments {:?}", batch.day_id, batch.indices),
                    components: format!("{}: node {node} ({op})", kind.name()),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let mut grads = g.grad_backward(loss, &model.params)?;
        if let Some(msg) = check_finite(&grads) {
            return Err(TrainError::NonFinite {
                iteration: it,
                batch: format!("day {}", batch.day_id),
                components: msg,
            });
        }
        grads.clip_global_norm(cfg.clip_norm);
        adam.step(&mut model.params, &grads);
        let record = LossRecord {
            iteration: it,
            guides: vec![GuideRecord {
                name: kind.name().into(),
                lambda: 1.0,
                loss: value,
            }],
            utility: 0.0,
            turnover: None,
            total: value,
            guard_dominated: false,
        };
        if let Some(log) = log.as_deref_mut() {
            log.append(&record)?;
        }
        losses.push(record);
        done = it + 1;

        if done % every == 0 || done == total_iters {
            let metric = mean_daily_ic(&model, data, splits.valid)?;
            if stop.observe(done, done as f64 / per_epoch, metric, &model.params) {
                reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if let Some(log) = log {
        log.flush()?;
    }
    let history = stop.finish(&mut model.params, losses, reason, done);
    Ok((model, history))
}

/// Cross-sectional and sizer stages trained on top of a frozen predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendedModel {
    pub config: ModelConfig,
    /// Frozen embedding/temporal parameters (and the unused predict head).
    pub frozen: ParamStore,
    pub trainable: ParamStore,
}

impl AppendedModel {
    pub fn binder(&self) -> Binder<'_> {
        Binder::with_frozen(&self.trainable, &self.frozen)
    }
}

pub fn new_appended(predictor: &Model, seed: u64) -> Result<AppendedModel, TrainError> {
    let config = ModelConfig {
        seed,
        ..predictor.config.clone()
    };
    let mut trainable = ParamStore::new(seed);
    init_parts(
        &mut trainable,
        &config,
        predictor.n_features,
        predictor.lookback,
        &[Part::Cross, Part::Sizer],
    )?;
    Ok(AppendedModel {
        config,
        frozen: predictor.params.clone(),
        trainable,
    })
}

/// Trains appended stages on the Sharpe utility; the predictor's
/// parameters are constants in every graph.
pub fn train_appended(
    mut appended: AppendedModel,
    data: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
    log: Option<&mut LossLog>,
) -> Result<(AppendedModel, TrainHistory), TrainError> {
    let config = appended.config.clone();
    let history = train_windows(
        &mut appended.trainable,
        Some(&appended.frozen),
        &config,
        &Guides::default(),
        data,
        splits,
        cfg,
        log,
    )?;
    Ok((appended, history))
}
