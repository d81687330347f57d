use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glab::{execute, Command, Options};

#[derive(Parser)]
#[command(name = "glab", version, about = "Guided end-to-end portfolio experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic panel and returns.
    GenData(Common),
    /// Winsorize, standardize and fill the configured panel.
    Preprocess(Common),
    /// Train every setting × seed and write checkpoints.
    Train(Common),
    /// Backtest trained runs on the validation and test splits.
    Backtest(Common),
    /// IC guide at each stage, 4-metric comparison table.
    AblatePlacement(Common),
    /// Guide types at the temporal stage, 4-metric comparison table.
    AblateGuideType(Common),
    /// Grid over IC and return guide coefficients, one heatmap per metric.
    Sensitivity(Common),
    /// Summary table over the backtested runs in the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Parallel runs; GLAB_JOBS takes precedence.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

fn jobs_from_env(flag: u64) -> Result<usize, String> {
    match std::env::var("GLAB_JOBS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("GLAB_JOBS must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(flag as usize),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Preprocess(c) => (Command::Preprocess, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Backtest(c) => (Command::Backtest, c),
        Cmd::AblatePlacement(c) => (Command::AblatePlacement, c),
        Cmd::AblateGuideType(c) => (Command::AblateGuideType, c),
        Cmd::Sensitivity(c) => (Command::Sensitivity, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let jobs = match jobs_from_env(common.jobs) {
        Ok(j) => j,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let opts = Options {
        config: common.config,
        seed: common.seed,
        out: common.out,
        jobs,
    };
    match execute(command, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
