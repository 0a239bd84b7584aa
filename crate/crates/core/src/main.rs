//! Command-line entry point. Metrics and reports go to stdout as one JSON
//! object per line; progress and warnings go to stderr.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical abort, 4 resume conflict.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mamba_peft::experiment::{
    cmd_count_params, cmd_eval, cmd_finetune, cmd_pretrain, cmd_search, ExperimentConfig,
    ExperimentError,
};
use mamba_peft::train::EpochMetrics;

/// Environment variable forcing single-worker (bit-deterministic) search.
const DETERMINISTIC_ENV: &str = "MAMBA_PEFT_DETERMINISTIC";

#[derive(Parser)]
#[command(
    name = "mamba-peft",
    about = "Selective state-space classifier with a PEFT catalog and a two-step hybrid PEFT search",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch on the base task and freeze the result as the
    /// pretrained snapshot.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to write (MPK1 format).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a pretrained checkpoint on the downstream task using the
    /// configured PEFT specs (or mode = full / linear-probe).
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional checkpoint of the adapted model.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Two-step search over method combinations, then hyperparameters.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where the winning spec list is written (a config consumable by
        /// `finetune`).
        #[arg(long)]
        out: PathBuf,
        /// Trial log (defaults to `<out>.trials.jsonl`); an existing log
        /// resumes the run.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Concurrent trial evaluations. Determinism is only promised at 1.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (with any configured specs attached) on the
    /// task's validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trainable-parameter accounting per spec and in total.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn print_history(history: &[EpochMetrics]) {
    for m in history {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
    }
}

fn run() -> Result<(), ExperimentError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let result = cmd_pretrain(&cfg, &out)?;
            print_history(&result.history);
            println!(
                "{}",
                serde_json::json!({ "type": "checkpoint", "path": result.checkpoint })
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let result = cmd_finetune(&cfg, &checkpoint, out.as_deref())?;
            print_history(&result.history);
            println!(
                "{}",
                serde_json::json!({
                    "type": "result",
                    "methods": result.labels,
                    "trainable_params": result.trainable_params,
                    "final_val_acc": result.final_val_acc,
                })
            );
        }
        Command::Search {
            config,
            checkpoint,
            out,
            log,
            workers,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let workers = if deterministic_mode() { 1 } else { workers.max(1) };
            let result = cmd_search(&cfg, &checkpoint, &out, log.as_deref(), workers)?;
            let report = &result.report;
            println!(
                "{}",
                serde_json::json!({
                    "type": "search_report",
                    "step1_trials": report.step1.records.len(),
                    "step2_trials": report.step2.records.len(),
                    "combination": report.combination,
                    "final_combination": report.final_combination,
                    "objective": report.final_objective,
                    "all_failed": report.all_failed,
                    "best_config": result.best_config_path,
                    "trial_log": result.log_path,
                })
            );
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let result = cmd_eval(&cfg, &checkpoint)?;
            println!(
                "{}",
                serde_json::json!({ "type": "eval", "split": "val", "loss": result.loss, "acc": result.acc })
            );
        }
        Command::CountParams {
            config,
            checkpoint,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let result = cmd_count_params(&cfg, checkpoint.as_deref())?;
            for row in &result.rows {
                println!(
                    "{}",
                    serde_json::json!({
                        "type": "param_count",
                        "label": row.label,
                        "params": row.params,
                        "formula": row.formula,
                    })
                );
            }
            println!(
                "{}",
                serde_json::json!({ "type": "param_total", "params": result.total })
            );
        }
    }
    Ok(())
}

fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
        .unwrap_or(false)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
