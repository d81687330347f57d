//! The eight commands. Every command reads the config, writes under the
//! output directory, and leaves artifacts the next command can pick up.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glab_core::dataflow::{write_panel, write_returns_csv};
use glab_core::guides::{GuideSpec, LossKind};
use glab_core::stages::Stage;
use rayon::prelude::*;

use crate::aggregate::{aggregate, Summary, METRICS};
use crate::config::{DataSource, ExperimentConfig, Regime, Setting};
use crate::runner::{backtest_run, full_run, load_dataset, load_raw, run_dir, train_run, RunRecord, RECORD_FILE};
use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Preprocess,
    Train,
    Backtest,
    AblatePlacement,
    AblateGuideType,
    Sensitivity,
    Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub config: PathBuf,
    /// Restricts `train`/`backtest` to one seed instead of the config list.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub jobs: usize,
}

pub const DATA_DIR: &str = "data";
pub const RAW_PANEL: &str = "raw_panel.glpn";
pub const PANEL: &str = "panel.glpn";
pub const RETURNS: &str = "returns.csv";

pub fn execute(cmd: Command, opts: &Options) -> Result<(), RunError> {
    let cfg = ExperimentConfig::load(&opts.config)?;
    match cmd {
        Command::GenData => gen_data(&cfg, &opts.out),
        Command::Preprocess => preprocess_cmd(&cfg, &opts.out),
        Command::Train => train_cmd(&cfg, opts),
        Command::Backtest => backtest_cmd(&cfg, opts),
        Command::AblatePlacement => {
            let settings = [Stage::Embedding, Stage::Temporal, Stage::CrossSectional]
                .map(|s| ablation_setting(s.name(), s, LossKind::Ic, cfg.ablation.lambda));
            ablation(&cfg, opts, "ablate-placement", &settings)
        }
        Command::AblateGuideType => {
            let settings = [LossKind::Ic, LossKind::Mse, LossKind::Clf, LossKind::Rank]
                .map(|k| ablation_setting(k.name(), Stage::Temporal, k, cfg.ablation.lambda));
            ablation(&cfg, opts, "ablate-guide-type", &settings)
        }
        Command::Sensitivity => sensitivity(&cfg, opts),
        Command::Report => report(&cfg, &opts.out),
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, RunError> {
    r.map_err(|e| RunError::Io(path.to_path_buf(), e))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        return Err(RunError::Config {
            path: "data".into(),
            message: "gen-data needs a `synthetic` data source".into(),
        });
    }
    let (panel, returns, _) = load_raw(cfg)?;
    let dir = out.join(DATA_DIR);
    io(&dir, fs::create_dir_all(&dir))?;
    write_panel(&panel, &dir.join(RAW_PANEL))?;
    write_returns_csv(&returns, &dir.join(RETURNS))?;
    let [t, n, w, f] = panel.dims();
    println!("wrote {t} days × {n} instruments × {w} lookback × {f} features to {}", dir.display());
    Ok(())
}

fn preprocess_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let (data, stats) = load_dataset(cfg)?;
    let dir = out.join(DATA_DIR);
    io(&dir, fs::create_dir_all(&dir))?;
    write_panel(&data.features, &dir.join(PANEL))?;
    write_returns_csv(&data.returns, &dir.join(RETURNS))?;
    if let Some(stats) = stats {
        let path = dir.join("preprocess_stats.json");
        io(&path, fs::write(&path, serde_json::to_string_pretty(&stats).expect("serializable") + "\n"))?;
    }
    println!("wrote preprocessed panel to {}", dir.join(PANEL).display());
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, RunError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))
}

/// Runs `f` over every task in a pool of `jobs` workers. Results come back
/// in task order; the first failure (in that order) is returned.
fn run_all<T, R, F>(jobs: usize, tasks: &[T], f: F) -> Result<Vec<R>, RunError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, RunError> + Sync,
{
    let results: Vec<Result<R, RunError>> = pool(jobs)?.install(|| tasks.par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn seeds(cfg: &ExperimentConfig, opts: &Options) -> Vec<u64> {
    match opts.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn tasks(settings: &[Setting], seeds: &[u64]) -> Vec<(Setting, u64)> {
    settings.iter().flat_map(|s| seeds.iter().map(move |&seed| (s.clone(), seed))).collect()
}

fn train_cmd(cfg: &ExperimentConfig, opts: &Options) -> Result<(), RunError> {
    let (data, _) = load_dataset(cfg)?;
    let jobs = tasks(&cfg.settings(), &seeds(cfg, opts));
    run_all(opts.jobs, &jobs, |(setting, seed)| {
        let dir = run_dir(&opts.out, setting, *seed);
        train_run(cfg, &data, setting, *seed, &dir)?;
        eprintln!("trained {} seed {seed} -> {}", setting.name, dir.display());
        Ok(())
    })?;
    Ok(())
}

fn backtest_cmd(cfg: &ExperimentConfig, opts: &Options) -> Result<(), RunError> {
    let (data, _) = load_dataset(cfg)?;
    let jobs = tasks(&cfg.settings(), &seeds(cfg, opts));
    let records = run_all(opts.jobs, &jobs, |(setting, seed)| {
        let dir = run_dir(&opts.out, setting, *seed);
        backtest_run(cfg, &data, setting, *seed, &dir, Instant::now())
    })?;
    for r in &records {
        let m = &r.metrics["test"];
        println!(
            "{} seed {}: test sharpe {:.4} annualized return {:.4} max drawdown {:.4}",
            r.setting, r.seed, m.sharpe, m.annualized_return, m.max_drawdown
        );
    }
    Ok(())
}

fn ablation_setting(name: &str, placement: Stage, kind: LossKind, lambda: f64) -> Setting {
    Setting {
        name: name.into(),
        regime: Regime::EndToEnd,
        guides: vec![GuideSpec::new(placement, kind, lambda)],
    }
}

fn with_max_iters(cfg: &ExperimentConfig, max_iters: Option<usize>) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if max_iters.is_some() {
        cfg.train.max_iters = max_iters;
    }
    cfg
}

/// Trains and backtests each setting for every config seed, then writes
/// the comparison table.
fn ablation(cfg: &ExperimentConfig, opts: &Options, name: &str, settings: &[Setting]) -> Result<(), RunError> {
    let cfg = with_max_iters(cfg, cfg.ablation.max_iters);
    let (data, _) = load_dataset(&cfg)?;
    let root = opts.out.join(name);
    let jobs = tasks(settings, &cfg.seeds);
    let records = run_all(opts.jobs, &jobs, |(setting, seed)| {
        let r = full_run(&cfg, &data, setting, *seed, &run_dir(&root, setting, *seed))?;
        eprintln!("{name}: {} seed {seed} done in {:.1}s", setting.name, r.wall_time_s);
        Ok(r)
    })?;
    let order: Vec<String> = settings.iter().map(|s| s.name.clone()).collect();
    let summary = aggregate(&records, &order, "test")?;
    summary.emit(&root)?;
    print!("{}", summary.render());
    Ok(())
}

/// Label of one grid cell.
pub fn cell_name(lambda_ic: f64, lambda_return: f64) -> String {
    format!("ic={lambda_ic} return={lambda_return}")
}

/// IC guide on the temporal stage plus a return guide on the
/// cross-sectional stage, for every pair of coefficients.
fn sensitivity(cfg: &ExperimentConfig, opts: &Options) -> Result<(), RunError> {
    let cfg = with_max_iters(cfg, cfg.sensitivity.max_iters);
    let (data, _) = load_dataset(&cfg)?;
    let root = opts.out.join("sensitivity");
    let lambdas = &cfg.sensitivity.lambdas;
    let mut settings = Vec::with_capacity(lambdas.len() * lambdas.len());
    for &li in lambdas {
        for &lr in lambdas {
            settings.push(Setting {
                name: cell_name(li, lr),
                regime: Regime::EndToEnd,
                guides: vec![
                    GuideSpec::new(Stage::Temporal, LossKind::Ic, li),
                    GuideSpec::new(Stage::CrossSectional, LossKind::XsReturn, lr),
                ],
            });
        }
    }
    let jobs = tasks(&settings, &cfg.sensitivity.seeds);
    let records = run_all(opts.jobs, &jobs, |(setting, seed)| {
        let r = full_run(&cfg, &data, setting, *seed, &run_dir(&root, setting, *seed))?;
        eprintln!("sensitivity: {} seed {seed} done in {:.1}s", setting.name, r.wall_time_s);
        Ok(r)
    })?;
    let order: Vec<String> = settings.iter().map(|s| s.name.clone()).collect();
    let summary = aggregate(&records, &order, "test")?;
    summary.emit(&root)?;
    write_heatmaps(&summary, lambdas, &root)
}

pub fn heatmap_file(metric: &str) -> String {
    format!("heatmap_{metric}.csv")
}

/// One CSV per metric: rows are IC coefficients, columns return
/// coefficients, cells the mean over seeds.
fn write_heatmaps(summary: &Summary, lambdas: &[f64], dir: &Path) -> Result<(), RunError> {
    for (k, metric) in METRICS.iter().enumerate() {
        let mut text = String::from("lambda_ic\\lambda_return");
        for l in lambdas {
            text.push_str(&format!(",{l}"));
        }
        text.push('\n');
        for &li in lambdas {
            text.push_str(&li.to_string());
            for &lr in lambdas {
                let name = cell_name(li, lr);
                let row = summary
                    .rows
                    .iter()
                    .find(|r| r.setting == name)
                    .ok_or_else(|| RunError::Aggregate(format!("grid cell `{name}` has no runs")))?;
                text.push_str(&format!(",{}", row.stats[k].0));
            }
            text.push('\n');
        }
        let path = dir.join(heatmap_file(metric));
        io(&path, fs::write(&path, text))?;
    }
    Ok(())
}

/// Every `record.json` under `<root>/runs`, in path order.
pub fn collect_records(root: &Path) -> Result<Vec<RunRecord>, RunError> {
    let runs = root.join("runs");
    let mut paths = Vec::new();
    if runs.is_dir() {
        for setting in io(&runs, fs::read_dir(&runs))? {
            let setting = io(&runs, setting)?.path();
            if !setting.is_dir() {
                continue;
            }
            for seed in io(&setting, fs::read_dir(&setting))? {
                let p = io(&setting, seed)?.path().join(RECORD_FILE);
                if p.is_file() {
                    paths.push(p);
                }
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| RunRecord::load(p)).collect()
}

fn report(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let records = collect_records(out)?;
    let order: Vec<String> = cfg.settings().into_iter().map(|s| s.name).collect();
    let summary = aggregate(&records, &order, "test")?;
    let dir = out.join("report");
    summary.emit(&dir)?;
    print!("{}", summary.render());
    Ok(())
}
