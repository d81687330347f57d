//! Experiment runner: configuration, per-run pipeline, ablation grids and
//! summary tables. The `glab` binary is a thin clap front end over
//! [`commands::execute`].

pub mod aggregate;
pub mod commands;
pub mod config;
pub mod runner;

use std::path::PathBuf;

use glab_core::backtest::BacktestError;
use glab_core::dataflow::DataError;
use glab_core::objective::ObjectiveError;
use glab_core::stages::StageError;
use glab_core::trainer::TrainError;
use thiserror::Error;

pub use commands::{execute, Command, Options};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("aggregate: {0}")]
    Aggregate(String),
    #[error("worker pool: {0}")]
    Pool(String),
}
