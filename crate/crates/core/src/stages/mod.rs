//! The staged position model: embedding → temporal encoder →
//! cross-sectional attention → recurrent position sizer.
//!
//! Every stage is a function from the previous stage's node to the next,
//! so guides can hang off any intermediate representation.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::WindowBatch;
use crate::diff::{DiffError, Graph, NodeId, ParamStore};
use crate::tensor::Tensor;
use layers::{layer_norm_affine, linear, lstm_layer, positional_encoding};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    #[default]
    Mixer,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub temporal_layers: usize,
    pub cross_layers: usize,
    pub sizer_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the mixer perceptrons as a multiple of their input.
    pub mlp_ratio: usize,
    pub dropout_base: f64,
    pub dropout_cross: f64,
    pub temporal_kind: TemporalKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            temporal_layers: 3,
            cross_layers: 1,
            sizer_layers: 1,
            n_heads: 4,
            mlp_ratio: 2,
            dropout_base: 0.1,
            dropout_cross: 0.3,
            temporal_kind: TemporalKind::Mixer,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |m: String| Err(StageError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.temporal_layers == 0 || self.cross_layers == 0 || self.sizer_layers == 0 || self.mlp_ratio == 0 {
            return bad("layer counts and mlp_ratio must be at least 1".into());
        }
        for (name, p) in [("dropout_base", self.dropout_base), ("dropout_cross", self.dropout_cross)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

/// Named stages whose outputs guides may attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embedding,
    Temporal,
    CrossSectional,
    Positions,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Embedding => "embedding",
            Stage::Temporal => "temporal",
            Stage::CrossSectional => "cross_sectional",
            Stage::Positions => "positions",
        }
    }
}

/// Nodes of one forward pass, in stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutputs {
    /// (T' × n × W × d)
    pub embedding: NodeId,
    /// (T' × n × d)
    pub temporal: NodeId,
    /// (T' × n × d)
    pub cross_sectional: NodeId,
    /// (T' × n)
    pub scores: NodeId,
    /// (T' × n), rows on the simplex
    pub positions: NodeId,
}

impl StageOutputs {
    pub fn get(&self, stage: Stage) -> NodeId {
        match stage {
            Stage::Embedding => self.embedding,
            Stage::Temporal => self.temporal,
            Stage::CrossSectional => self.cross_sectional,
            Stage::Positions => self.positions,
        }
    }
}

/// Resolves parameter names to graph leaves. Names found in `frozen` become
/// constants, so no gradient reaches them.
#[derive(Debug, Clone, Copy)]
pub struct Binder<'a> {
    pub trainable: &'a ParamStore,
    pub frozen: Option<&'a ParamStore>,
}

impl<'a> Binder<'a> {
    pub fn new(trainable: &'a ParamStore) -> Self {
        Self { trainable, frozen: None }
    }

    pub fn with_frozen(trainable: &'a ParamStore, frozen: &'a ParamStore) -> Self {
        Self {
            trainable,
            frozen: Some(frozen),
        }
    }

    pub fn shape(&self, name: &str) -> Option<&'a [usize]> {
        self.trainable
            .get(name)
            .or_else(|| self.frozen.and_then(|f| f.get(name)))
            .map(|t| t.shape())
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId, DiffError> {
        if self.trainable.contains(name) {
            return g.param(self.trainable, name);
        }
        match self.frozen.and_then(|f| f.get(name)) {
            Some(t) => Ok(g.constant(t.clone())),
            None => Err(DiffError::UnknownParam(name.to_string())),
        }
    }
}

/// Parameter groups, registered under their prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Embedding,
    Temporal,
    Cross,
    Sizer,
    /// Linear d → 1 head on the temporal embedding, for stage-wise predictors.
    PredictHead,
}

/// Initializes the parameters of `parts` into `store` (seeded per name).
pub fn init_parts(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    n_features: usize,
    lookback: usize,
    parts: &[Part],
) -> Result<(), StageError> {
    cfg.validate()?;
    let d = cfg.d_model;
    for part in parts {
        match part {
            Part::Embedding => {
                layers::init_linear(store, "embed.l1", n_features, d)?;
                layers::init_linear(store, "embed.l2", d, d)?;
            }
            Part::Temporal => match cfg.temporal_kind {
                TemporalKind::Mixer => {
                    let (hw, hd) = (cfg.mlp_ratio * lookback, cfg.mlp_ratio * d);
                    for b in 0..cfg.temporal_layers {
                        let p = format!("temporal.block{b}");
                        layers::init_layer_norm(store, &format!("{p}.ln_token"), d)?;
                        layers::init_linear(store, &format!("{p}.token1"), lookback, hw)?;
                        layers::init_linear(store, &format!("{p}.token2"), hw, lookback)?;
                        layers::init_layer_norm(store, &format!("{p}.ln_channel"), d)?;
                        layers::init_linear(store, &format!("{p}.channel1"), d, hd)?;
                        layers::init_linear(store, &format!("{p}.channel2"), hd, d)?;
                    }
                    layers::init_layer_norm(store, "temporal.ln_out", d)?;
                }
                TemporalKind::Lstm => layers::init_lstm(store, "temporal.lstm", d, d)?,
            },
            Part::Cross => {
                for l in 0..cfg.cross_layers {
                    let p = format!("cross.layer{l}");
                    for m in ["q", "k", "v", "o"] {
                        layers::init_linear(store, &format!("{p}.{m}"), d, d)?;
                    }
                    layers::init_layer_norm(store, &format!("{p}.ln"), d)?;
                }
            }
            Part::Sizer => {
                for l in 0..cfg.sizer_layers {
                    layers::init_lstm(store, &format!("sizer.lstm{l}"), d, d)?;
                }
                layers::init_linear(store, "sizer.head", d, 1)?;
            }
            Part::PredictHead => layers::init_linear(store, "predict.head", d, 1)?,
        }
    }
    Ok(())
}

fn dims(g: &Graph, x: NodeId) -> Vec<usize> {
    g.shape(x).to_vec()
}

/// Per-(instrument, offset) perceptron F → d → d plus sinusoidal position
/// encoding over the lookback axis. `x` is (… × W × F).
pub fn embed(g: &mut Graph, p: &Binder, cfg: &ModelConfig, x: NodeId) -> Result<NodeId, StageError> {
    let s = dims(g, x);
    let (w, f) = (s[s.len() - 2], s[s.len() - 1]);
    let expected = p
        .shape("embed.l1.w")
        .ok_or_else(|| DiffError::UnknownParam("embed.l1.w".into()))?[0];
    if f != expected {
        return Err(StageError::Config(format!(
            "model expects {expected} features, batch has {f}"
        )));
    }
    let h = linear(g, p, "embed.l1", x)?;
    let h = g.tanh(h)?;
    let h = linear(g, p, "embed.l2", h)?;
    let pe = g.constant(positional_encoding(w, cfg.d_model));
    Ok(g.add(h, pe)?)
}

/// (… × W × d) → (… × d), independently per instrument.
pub fn temporal_encode(g: &mut Graph, p: &Binder, cfg: &ModelConfig, h: NodeId) -> Result<NodeId, StageError> {
    let s = dims(g, h);
    let r = s.len();
    match cfg.temporal_kind {
        TemporalKind::Mixer => {
            let mut x = h;
            let mut swap: Vec<usize> = (0..r).collect();
            swap.swap(r - 1, r - 2);
            for b in 0..cfg.temporal_layers {
                let pre = format!("temporal.block{b}");
                // token mixing across the lookback axis
                let y = layer_norm_affine(g, p, &format!("{pre}.ln_token"), x)?;
                let y = g.transpose(y, &swap)?;
                let y = linear(g, p, &format!("{pre}.token1"), y)?;
                let y = g.tanh(y)?;
                let y = linear(g, p, &format!("{pre}.token2"), y)?;
                let y = g.transpose(y, &swap)?;
                let y = g.dropout(y, cfg.dropout_base)?;
                x = g.add(x, y)?;
                // channel mixing across the latent axis
                let y = layer_norm_affine(g, p, &format!("{pre}.ln_channel"), x)?;
                let y = linear(g, p, &format!("{pre}.channel1"), y)?;
                let y = g.tanh(y)?;
                let y = linear(g, p, &format!("{pre}.channel2"), y)?;
                let y = g.dropout(y, cfg.dropout_base)?;
                x = g.add(x, y)?;
            }
            let x = layer_norm_affine(g, p, "temporal.ln_out", x)?;
            Ok(g.mean(x, r - 2)?)
        }
        TemporalKind::Lstm => {
            let steps = s[r - 2];
            let mut lead = s[..r - 2].to_vec();
            let batch: usize = lead.iter().product();
            let seq = g.reshape(h, &[batch, steps, cfg.d_model])?;
            let seq = g.transpose(seq, &[1, 0, 2])?;
            let out = lstm_layer(g, p, "temporal.lstm", seq, cfg.d_model)?;
            let last = g.slice(out, 0, steps - 1, steps)?;
            lead.push(cfg.d_model);
            Ok(g.reshape(last, &lead)?)
        }
    }
}

/// Multi-head self-attention over the instrument axis of (T' × n × d),
/// with post-norm residual.
pub fn cross_encode(g: &mut Graph, p: &Binder, cfg: &ModelConfig, h: NodeId) -> Result<NodeId, StageError> {
    let s = dims(g, h);
    let (t, n, d) = (s[0], s[1], s[2]);
    let heads = cfg.n_heads;
    let dh = d / heads;
    let mut x = h;
    for l in 0..cfg.cross_layers {
        let pre = format!("cross.layer{l}");
        let split = |g: &mut Graph, name: &str, x: NodeId| -> Result<NodeId, StageError> {
            let y = linear(g, p, &format!("{pre}.{name}"), x)?;
            let y = g.reshape(y, &[t, n, heads, dh])?;
            Ok(g.transpose(y, &[0, 2, 1, 3])?)
        };
        let q = split(g, "q", x)?;
        let k = split(g, "k", x)?;
        let v = split(g, "v", x)?;
        let kt = g.transpose(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 3)?;
        let attn = g.dropout(attn, cfg.dropout_cross)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[t, n, d])?;
        let out = linear(g, p, &format!("{pre}.o"), ctx)?;
        let out = g.dropout(out, cfg.dropout_base)?;
        let sum = g.add(x, out)?;
        x = layer_norm_affine(g, p, &format!("{pre}.ln"), sum)?;
    }
    Ok(x)
}

/// Recurrence over days (shared across instruments), linear score head,
/// softmax across instruments. Returns (scores, positions), both (T' × n).
pub fn size_positions(g: &mut Graph, p: &Binder, cfg: &ModelConfig, h: NodeId) -> Result<(NodeId, NodeId), StageError> {
    let s = dims(g, h);
    let (t, n) = (s[0], s[1]);
    let mut seq = h;
    for l in 0..cfg.sizer_layers {
        seq = lstm_layer(g, p, &format!("sizer.lstm{l}"), seq, cfg.d_model)?;
    }
    let scores = linear(g, p, "sizer.head", seq)?;
    let scores = g.reshape(scores, &[t, n])?;
    let positions = g.softmax(scores, 1)?;
    Ok((scores, positions))
}

/// Full staged model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub n_features: usize,
    pub lookback: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, n_features: usize, lookback: usize) -> Result<Self, StageError> {
        let mut params = ParamStore::new(config.seed);
        init_parts(
            &mut params,
            &config,
            n_features,
            lookback,
            &[Part::Embedding, Part::Temporal, Part::Cross, Part::Sizer],
        )?;
        Ok(Self {
            config,
            n_features,
            lookback,
            params,
        })
    }

    /// Chains all four stages over a window batch.
    pub fn forward(&self, g: &mut Graph, batch: &WindowBatch) -> Result<StageOutputs, StageError> {
        forward_with(g, &Binder::new(&self.params), &self.config, &batch.features)
    }
}

/// Forward pass over a (T' × n × W × F) feature tensor.
pub fn forward_with(g: &mut Graph, p: &Binder, cfg: &ModelConfig, features: &Tensor) -> Result<StageOutputs, StageError> {
    if features.rank() != 4 {
        return Err(StageError::Config(format!(
            "expected (days × instruments × lookback × features), got {:?}",
            features.shape()
        )));
    }
    let x = g.constant(features.clone());
    let embedding = embed(g, p, cfg, x)?;
    let temporal = temporal_encode(g, p, cfg, embedding)?;
    let cross_sectional = cross_encode(g, p, cfg, temporal)?;
    let (scores, positions) = size_positions(g, p, cfg, cross_sectional)?;
    Ok(StageOutputs {
        embedding,
        temporal,
        cross_sectional,
        scores,
        positions,
    })
}

/// Stage-wise predictor: embedding and temporal stages plus a linear head.
/// `features` is (n × W × F) or (T' × n × W × F); returns the predictions
/// (same leading shape) and the temporal embedding.
pub fn predict_with(g: &mut Graph, p: &Binder, cfg: &ModelConfig, features: &Tensor) -> Result<(NodeId, NodeId), StageError> {
    let x = g.constant(features.clone());
    let e = embed(g, p, cfg, x)?;
    let h = temporal_encode(g, p, cfg, e)?;
    let y = linear(g, p, "predict.head", h)?;
    let lead = dims(g, h);
    let y = g.reshape(y, &lead[..lead.len() - 1])?;
    Ok((y, h))
}

#[cfg(test)]
mod tests;
