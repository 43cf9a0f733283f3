//! `l0gm`: train gated models, sweep experiment plans, evaluate
//! checkpoints under the perturbation protocol, and emit plot data.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use l0gm_core::config::FileConfig;
use l0gm_core::error::{CoreError, ErrorClass};
use l0gm_core::report::{write_emit, EmitKind};
use l0gm_core::runner::{load_aggregate, run_plan, PlanFile};
use l0gm_core::trainer::{evaluate, evaluate_robustness, train, Checkpoint, DataSpec};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "l0gm",
    version,
    about = "L0-gated representation models: train, sweep, eval, report"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a config file.
    Train {
        /// TOML run config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed (L0GM_SEED overrides both).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json and checkpoint.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute an experiment plan's (variant, seed) grid and aggregate.
    Sweep {
        /// TOML plan file.
        #[arg(long)]
        plan: PathBuf,
        /// Concurrent training jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory for cells/, aggregate.json, runs.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its (or an overridden) dataset.
    Eval {
        /// checkpoint.json written by train or sweep.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional CSV path replacing the checkpoint's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also run the 13-condition perturbation grid.
        #[arg(long)]
        robustness: bool,
        /// Output directory for eval.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit plot data from a sweep directory's aggregate.
    Report {
        /// Sweep output directory holding aggregate.json.
        #[arg(long = "in")]
        in_dir: PathBuf,
        /// Which tabular plot file to write.
        #[arg(long, value_enum)]
        emit: EmitArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmitArg {
    Pareto,
    Reliability,
    #[value(name = "learning_curve")]
    LearningCurve,
}

impl From<EmitArg> for EmitKind {
    fn from(e: EmitArg) -> Self {
        match e {
            EmitArg::Pareto => EmitKind::Pareto,
            EmitArg::Reliability => EmitKind::Reliability,
            EmitArg::LearningCurve => EmitKind::LearningCurve,
        }
    }
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint_step: usize,
    checkpoint_seed: u64,
    train_data_hash: String,
    eval_data_hash: String,
    test: l0gm_core::trainer::EvalReport,
    robustness: Option<l0gm_core::trainer::RobustnessReport>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn run(cmd: Cmd) -> Result<(), CoreError> {
    match cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = FileConfig::load(&config)?;
            cfg.resolve_seed(seed)?;
            let data_spec = cfg.data_spec()?;
            let model_cfg = cfg.model_config()?;
            let train_cfg = cfg.train_config()?;
            let outcome = train(&data_spec, &model_cfg, &train_cfg)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &outcome.report)?;
            write_json(&out.join("checkpoint.json"), &outcome.checkpoint)?;
            let r = &outcome.report;
            println!(
                "trained seed={} steps={} best_step={} acc={:.4} auc={} ece={:.4} active={:.3}",
                r.seed,
                r.steps,
                r.best_step,
                r.test.accuracy,
                r.test.auc.map_or("NA".into(), |a| format!("{a:.4}")),
                r.test.ece,
                r.active_fraction
            );
            Ok(())
        }
        Cmd::Sweep { plan, jobs, out } => {
            let plan = PlanFile::load(&plan)?;
            let agg = run_plan(&plan, &out, jobs)?;
            println!(
                "sweep {} complete: {} variants x {} seeds -> {}",
                agg.kind,
                agg.variants.len(),
                agg.seeds.len(),
                out.join("aggregate.json").display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            robustness,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let override_spec = data.map(|p| DataSpec::Adult {
                path: p.display().to_string(),
                split: None,
            });
            let (store, model, task_data) = ckpt.rebuild(override_spec.as_ref())?;
            let preds = model.predictions(&store, &task_data, task_data.test_idx())?;
            let test = evaluate(&preds, ckpt.train.metric_bins)?;
            let rob = if robustness {
                Some(evaluate_robustness(
                    &model,
                    &store,
                    &task_data,
                    task_data.test_idx(),
                    ckpt.seed,
                )?)
            } else {
                None
            };
            let output = EvalOutput {
                checkpoint_step: ckpt.step,
                checkpoint_seed: ckpt.seed,
                train_data_hash: ckpt.data_hash.clone(),
                eval_data_hash: task_data.hash().to_string(),
                test,
                robustness: rob,
            };
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("eval.json"), &output)?;
            println!(
                "eval acc={:.4} ece={:.4} n={} -> {}",
                output.test.accuracy,
                output.test.ece,
                output.test.n,
                out.join("eval.json").display()
            );
            Ok(())
        }
        Cmd::Report { in_dir, emit } => {
            let agg = load_aggregate(&in_dir)?;
            let path = write_emit(&agg, emit.into(), &in_dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CoreError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
