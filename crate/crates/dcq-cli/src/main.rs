use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcq_cli::commands;
use dcq_cli::config::RunConfig;
use dcq_core::DcqError;

#[derive(Parser)]
#[command(name = "dcq", about = "Sectional quantized training and bound verification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable): --set lr=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for --set out_dir=...
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shortcut for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the full-precision teacher.
    TrainFp(Common),
    /// Quantize a trained checkpoint with no retraining.
    QuantizeDirect(Common),
    /// Sectional distillation training (split, conquer, merge).
    Dcq(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Lipschitz/error-bound report for a checkpoint.
    Bounds(Common),
    /// Weight-flip statistics, histograms, and feature-map loss grids.
    Analyze(Common),
    /// Compare 1-, 2-, and 4-stage splitting under equal per-section budgets.
    SplitStudy(Common),
}

fn resolve(common: &Common) -> Result<RunConfig, DcqError> {
    let mut overrides = common.sets.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn dispatch(cli: Cli) -> Result<serde_json::Value, DcqError> {
    match &cli.command {
        Command::TrainFp(c) => commands::train_fp(&resolve(c)?),
        Command::QuantizeDirect(c) => commands::quantize_direct(&resolve(c)?),
        Command::Dcq(c) => commands::dcq(&resolve(c)?),
        Command::Eval(c) => commands::eval(&resolve(c)?),
        Command::Bounds(c) => commands::bounds_report(&resolve(c)?),
        Command::Analyze(c) => commands::analyze(&resolve(c)?),
        Command::SplitStudy(c) => commands::split_study(&resolve(c)?),
    }
}

fn exit_code(err: &DcqError) -> u8 {
    match err {
        DcqError::Config(_) => 3,
        DcqError::Io(_) | DcqError::Format(_) => 4,
        _ => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = match &err {
                DcqError::Config(_) => "config",
                DcqError::Io(_) => "io",
                DcqError::Format(_) => "format",
                DcqError::Shape(_) => "shape",
                DcqError::NonFinite { .. } => "non_finite",
                DcqError::State(_) => "state",
                DcqError::Diverged { .. } => "diverged",
                DcqError::Empty(_) => "empty",
            };
            eprintln!("{}", serde_json::json!({ "error": err.to_string(), "kind": kind }));
            ExitCode::from(exit_code(&err))
        }
    }
}
