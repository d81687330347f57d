//! One (setting, seed) run: train, checkpoint, backtest, record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glab_core::backtest::{emit_report, run_backtest, Metrics, PositionSeries};
use glab_core::dataflow::{
    generate_synthetic, preprocess, read_panel, read_returns_csv, DayRange, FeaturePanel, PreprocessStats, ReturnPanel,
};
use glab_core::objective::LossLog;
use glab_core::stages::{load_checkpoint, save_checkpoint, Binder, CheckpointMeta, Model};
use glab_core::trainer::{
    model_positions, mv_positions, new_appended, new_predictor, predict_days, train_appended, train_end_to_end,
    train_predictive, AppendedModel, Dataset, GuidedModel, TrainHistory,
};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Regime, Setting};
use crate::RunError;

pub const HISTORY_FILE: &str = "history.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTOR_DIR: &str = "predictor";

/// Raw data as configured, before preprocessing.
pub fn load_raw(cfg: &ExperimentConfig) -> Result<(FeaturePanel, ReturnPanel, bool), RunError> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let (f, r) = generate_synthetic(s)?;
            Ok((f, r, false))
        }
        DataSource::Files(files) => {
            let f = read_panel(&files.panel)?;
            let r = read_returns_csv(&files.returns)?;
            Ok((f, r, files.preprocessed))
        }
    }
}

/// The preprocessed dataset every run trains on.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<PreprocessStats>), RunError> {
    let (raw, returns, done) = load_raw(cfg)?;
    let (features, stats) = if done {
        (raw, None)
    } else {
        let p = &cfg.preprocess;
        let (f, s) = preprocess(&raw, p.winsor_k, p.winsor_rule, p.clip_bound);
        (f, Some(s))
    };
    let data = Dataset::new(features, returns)?;
    cfg.splits.validate(data.features.n_days())?;
    Ok((data, stats))
}

pub fn run_dir(root: &Path, setting: &Setting, seed: u64) -> PathBuf {
    root.join("runs").join(setting.slug()).join(format!("seed-{seed}"))
}

/// Summary of one finished run. `wall_time_s` makes `record.json` the only
/// run artifact that differs between identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: String,
    pub regime: Regime,
    pub config_hash: String,
    pub seed: u64,
    /// Backtest metrics keyed by split name (`valid`, `test`).
    pub metrics: BTreeMap<String, Metrics>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let bytes = fs::read(path).map_err(|e| RunError::Io(path.to_path_buf(), e))?;
        serde_json::from_slice(&bytes).map_err(|e| RunError::Artifact(format!("{}: {e}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| RunError::Io(path.to_path_buf(), e))
}

fn meta(model: &Model, history: &TrainHistory, setting: &Setting, hash: &str) -> CheckpointMeta {
    CheckpointMeta {
        model: model.config.clone(),
        n_features: model.n_features,
        lookback: model.lookback,
        seed: 0,
        epoch: history.best_epoch(),
        extra: serde_json::json!({
            "setting": setting.name,
            "regime": setting.regime,
            "guides": setting.guides,
            "config_hash": hash,
            "stop_reason": history.stop_reason,
        }),
        tensors: Vec::new(),
    }
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> (glab_core::stages::ModelConfig, glab_core::trainer::TrainConfig) {
    let mut model = cfg.model.clone();
    model.seed = seed;
    let mut train = cfg.train.clone();
    train.seed = seed;
    (model, train)
}

/// Trains one run and writes its checkpoint(s), history and loss log.
pub fn train_run(cfg: &ExperimentConfig, data: &Dataset, setting: &Setting, seed: u64, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::Io(dir.to_path_buf(), e))?;
    let hash = cfg.run_spec(setting).hash();
    let (model_cfg, train_cfg) = seeded(cfg, seed);
    let [_, _, w, f] = data.features.dims();
    let mut log = LossLog::create(&dir.join(LOG_FILE))?;
    let history = match setting.regime {
        Regime::EndToEnd => {
            let m = GuidedModel::new(model_cfg, f, w, &setting.guides)?;
            let (m, h) = train_end_to_end(m, data, &cfg.splits, &train_cfg, Some(&mut log))?;
            save_checkpoint(&dir.join(CHECKPOINT_DIR), &meta(&m.model, &h, setting, &hash), &m.model.params)?;
            h
        }
        Regime::Optimization | Regime::Nn => {
            let p = new_predictor(model_cfg, f, w)?;
            let (p, h) = train_predictive(p, data, &cfg.splits, cfg.predict_loss, &train_cfg, Some(&mut log))?;
            save_checkpoint(&dir.join(PREDICTOR_DIR), &meta(&p, &h, setting, &hash), &p.params)?;
            if setting.regime == Regime::Optimization {
                h
            } else {
                // the appended stages train on the checkpointed predictor
                let (_, frozen) = load_checkpoint(&dir.join(PREDICTOR_DIR))?;
                let p = Model { params: frozen, ..p };
                let a = new_appended(&p, seed)?;
                let (a, h2) = train_appended(a, data, &cfg.splits, &train_cfg, Some(&mut log))?;
                let shell = Model {
                    config: a.config.clone(),
                    params: a.trainable.clone(),
                    ..p
                };
                save_checkpoint(&dir.join(CHECKPOINT_DIR), &meta(&shell, &h2, setting, &hash), &a.trainable)?;
                write_json(&dir.join("predictor_history.json"), &h)?;
                h2
            }
        }
    };
    write_json(&dir.join(HISTORY_FILE), &history)
}

/// Positions over `range` from a trained run directory.
pub fn run_positions(
    cfg: &ExperimentConfig,
    data: &Dataset,
    setting: &Setting,
    dir: &Path,
    range: DayRange,
) -> Result<PositionSeries, RunError> {
    Ok(match setting.regime {
        Regime::EndToEnd => {
            let (meta, params) = load_checkpoint(&dir.join(CHECKPOINT_DIR))?;
            model_positions(&Binder::new(&params), &meta.model, data, range)?
        }
        Regime::Optimization => {
            let (meta, params) = load_checkpoint(&dir.join(PREDICTOR_DIR))?;
            let days = predict_days(&Binder::new(&params), &meta.model, data, range)?;
            mv_positions(&days, data, &cfg.optimizer, cfg.signal_scale)?
        }
        Regime::Nn => {
            let (_, frozen) = load_checkpoint(&dir.join(PREDICTOR_DIR))?;
            let (meta, trainable) = load_checkpoint(&dir.join(CHECKPOINT_DIR))?;
            let a = AppendedModel {
                config: meta.model,
                frozen,
                trainable,
            };
            model_positions(&a.binder(), &a.config, data, range)?
        }
    })
}

/// Backtests a trained run on the validation and test splits, writing
/// `backtest/<split>/` report files and the run record.
pub fn backtest_run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    setting: &Setting,
    seed: u64,
    dir: &Path,
    started: Instant,
) -> Result<RunRecord, RunError> {
    if !dir.join(HISTORY_FILE).exists() {
        return Err(RunError::Artifact(format!(
            "{} has no trained model; run `train` first",
            dir.display()
        )));
    }
    let mut metrics = BTreeMap::new();
    let mut artifacts = vec![HISTORY_FILE.to_string(), LOG_FILE.to_string()];
    for (name, range) in [("valid", cfg.splits.valid), ("test", cfg.splits.test)] {
        let pos = run_positions(cfg, data, setting, dir, range)?;
        let report = run_backtest(&pos, &data.returns, data.features.tradable(), &cfg.backtest)?;
        let out = dir.join("backtest").join(name);
        emit_report(&report, &out)?;
        artifacts.push(format!("backtest/{name}"));
        metrics.insert(name.to_string(), report.metrics);
    }
    let record = RunRecord {
        setting: setting.name.clone(),
        regime: setting.regime,
        config_hash: cfg.run_spec(setting).hash(),
        seed,
        metrics,
        artifacts,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(RECORD_FILE), &record)?;
    Ok(record)
}

/// Train then backtest.
pub fn full_run(cfg: &ExperimentConfig, data: &Dataset, setting: &Setting, seed: u64, dir: &Path) -> Result<RunRecord, RunError> {
    let started = Instant::now();
    train_run(cfg, data, setting, seed, dir)?;
    backtest_run(cfg, data, setting, seed, dir, started)
}
