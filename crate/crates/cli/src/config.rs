//! Experiment configuration: one JSON file fully determines every run.

use std::path::{Path, PathBuf};

use glab_core::backtest::BacktestConfig;
use glab_core::dataflow::{DayRange, SynthConfig, WinsorRule};
use glab_core::guides::{GuideSpec, Guides};
use glab_core::mvopt::MvConfig;
use glab_core::stages::ModelConfig;
use glab_core::trainer::{PredictLoss, Splits, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Files(PanelFiles),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelFiles {
    /// Feature panel file; relative paths resolve against the config file.
    pub panel: PathBuf,
    /// Returns CSV.
    pub returns: PathBuf,
    /// Skip preprocessing because the panel already went through it.
    #[serde(default)]
    pub preprocessed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub winsor_k: f64,
    pub winsor_rule: WinsorRule,
    pub clip_bound: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            winsor_k: 0.1,
            winsor_rule: WinsorRule::Literal,
            clip_bound: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Staged model trained on the Sharpe utility plus guides.
    #[default]
    EndToEnd,
    /// Predictor followed by the mean-variance optimizer.
    Optimization,
    /// Predictor with cross-sectional and sizer stages trained on top.
    Nn,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::EndToEnd => "end_to_end",
            Regime::Optimization => "optimization",
            Regime::Nn => "nn",
        }
    }
}

/// A named regime plus guide list, the unit the summary table aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub name: String,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub guides: Vec<GuideSpec>,
}

impl Setting {
    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        slug(&self.name)
    }
}

pub fn slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Values of both coefficients.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Overrides applied to `train` for grid cells only.
    pub max_iters: Option<usize>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            lambdas: (0..8).map(|k| (2 + 4 * k) as f64 / 10.0).collect(),
            seeds: vec![0, 1],
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Coefficient of the ablated guide.
    pub lambda: f64,
    pub max_iters: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub preprocess: PreprocessConfig,
    pub splits: Splits,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Regime and guides of the unnamed setting used when `settings` is empty.
    pub regime: Regime,
    pub guides: Vec<GuideSpec>,
    pub settings: Vec<Setting>,
    pub predict_loss: PredictLoss,
    pub backtest: BacktestConfig,
    pub optimizer: MvConfig,
    /// Multiplier turning z-scored predictions into expected returns.
    pub signal_scale: f64,
    pub seeds: Vec<u64>,
    pub ablation: AblationConfig,
    pub sensitivity: SensitivityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            preprocess: PreprocessConfig::default(),
            splits: Splits {
                train: DayRange::new(0, 300),
                valid: DayRange::new(300, 400),
                test: DayRange::new(400, 500),
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            regime: Regime::EndToEnd,
            guides: Vec::new(),
            settings: Vec::new(),
            predict_loss: PredictLoss::NegIc,
            backtest: BacktestConfig::default(),
            optimizer: MvConfig::default(),
            signal_scale: 0.05,
            seeds: vec![0, 1, 2, 3],
            ablation: AblationConfig::default(),
            sensitivity: SensitivityConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config. Relative data paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text)?;
        if let DataSource::Files(files) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut files.panel, &mut files.returns] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, RunError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| RunError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let err = |path: &str, e: &dyn std::fmt::Display| RunError::Config {
            path: path.into(),
            message: e.to_string(),
        };
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| err("data.synthetic", &e))?;
            self.splits.validate(s.n_days).map_err(|e| err("splits", &e))?;
        }
        self.model.validate().map_err(|e| err("model", &e))?;
        self.train.validate().map_err(|e| err("train", &e))?;
        self.optimizer.validate().map_err(|e| err("optimizer", &e))?;
        if !(self.preprocess.winsor_k >= 0.0 && self.preprocess.clip_bound > 0.0) {
            return Err(err("preprocess", &"winsor_k must be ≥ 0 and clip_bound > 0"));
        }
        if !(self.backtest.cost_rate >= 0.0) {
            return Err(err("backtest.cost_rate", &"must be ≥ 0"));
        }
        if !(self.signal_scale >= 0.0 && self.signal_scale.is_finite()) {
            return Err(err("signal_scale", &"must be ≥ 0"));
        }
        if self.seeds.is_empty() {
            return Err(err("seeds", &"at least one seed is required"));
        }
        Guides::validate(&self.guides).map_err(|e| err("guides", &e))?;
        let mut names = std::collections::BTreeSet::new();
        for (k, s) in self.settings.iter().enumerate() {
            Guides::validate(&s.guides).map_err(|e| err(&format!("settings[{k}].guides"), &e))?;
            if s.slug().is_empty() || !names.insert(s.slug()) {
                return Err(err(&format!("settings[{k}].name"), &format!("`{}` is empty or not unique", s.name)));
            }
            if s.regime != Regime::EndToEnd && !s.guides.is_empty() {
                return Err(err(&format!("settings[{k}].guides"), &"guides apply to the end_to_end regime only"));
            }
        }
        if self.ablation.max_iters == Some(0) || self.sensitivity.max_iters == Some(0) {
            return Err(err("ablation.max_iters", &"must be ≥ 1"));
        }
        if self.sensitivity.lambdas.is_empty() || self.sensitivity.seeds.is_empty() {
            return Err(err("sensitivity", &"needs at least one lambda and one seed"));
        }
        if self.sensitivity.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(err("sensitivity.lambdas", &"coefficients must be ≥ 0"));
        }
        Ok(())
    }

    /// Declared settings, or one setting built from the top-level regime
    /// and guides.
    pub fn settings(&self) -> Vec<Setting> {
        if self.settings.is_empty() {
            vec![Setting {
                name: "default".into(),
                regime: self.regime,
                guides: self.guides.clone(),
            }]
        } else {
            self.settings.clone()
        }
    }

    /// Everything one (setting, seed) run depends on, seed excluded.
    pub fn run_spec(&self, setting: &Setting) -> RunSpec {
        let mut model = self.model.clone();
        model.seed = 0;
        let mut train = self.train.clone();
        train.seed = 0;
        let stagewise = setting.regime != Regime::EndToEnd;
        RunSpec {
            data: self.data.clone(),
            preprocess: self.preprocess.clone(),
            splits: self.splits,
            model,
            train,
            regime: setting.regime,
            guides: setting.guides.clone(),
            predict_loss: stagewise.then_some(self.predict_loss),
            optimizer: (setting.regime == Regime::Optimization).then(|| self.optimizer.clone()),
            signal_scale: (setting.regime == Regime::Optimization).then_some(self.signal_scale),
            backtest: self.backtest.clone(),
        }
    }
}

/// The semantic content of one run. Fields a regime ignores are `None`
/// so they do not enter its hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub data: DataSource,
    pub preprocess: PreprocessConfig,
    pub splits: Splits,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regime: Regime,
    pub guides: Vec<GuideSpec>,
    pub predict_loss: Option<PredictLoss>,
    pub optimizer: Option<MvConfig>,
    pub signal_scale: Option<f64>,
    pub backtest: BacktestConfig,
}

impl RunSpec {
    /// SHA-256 of the canonical JSON form (sorted keys, shortest
    /// round-trip floats), hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("run spec serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
