//! Experiment plans: a base config plus a variant axis (lambda sweep,
//! annealing ablation, coupling ablation, robustness protocol), executed
//! over a seed list. Each (variant, seed) cell trains once, keyed by a
//! content hash of its resolved config, so re-running a finished plan does
//! no training. The aggregator then folds cell reports into one summary
//! with the raw robustness grid embedded, keeping Rob mu and Worst
//! recomputable from what was serialized.

use crate::config::FileConfig;
use crate::error::{CoreError, Result};
use crate::robustness::RobustnessMatrix;
use crate::schedule::ScheduleMode;
use crate::trainer::{train, CurvePoint, RunReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const AGGREGATE_VERSION: u32 = 1;
pub const PROTOCOL_LAMBDA_RANGE: (f64, f64) = (1e-4, 1e-2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Single,
    LambdaSweep,
    AnnealAblation,
    CouplingAblation,
    RobustnessProtocol,
}

impl PlanKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PlanKind::Single),
            "lambda_sweep" => Ok(PlanKind::LambdaSweep),
            "anneal_ablation" => Ok(PlanKind::AnnealAblation),
            "coupling_ablation" => Ok(PlanKind::CouplingAblation),
            "robustness_protocol" => Ok(PlanKind::RobustnessProtocol),
            other => Err(CoreError::Config(format!(
                "unknown plan kind {other:?} (expected single, lambda_sweep, anneal_ablation, coupling_ablation, or robustness_protocol)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlanKind::Single => "single",
            PlanKind::LambdaSweep => "lambda_sweep",
            PlanKind::AnnealAblation => "anneal_ablation",
            PlanKind::CouplingAblation => "coupling_ablation",
            PlanKind::RobustnessProtocol => "robustness_protocol",
        }
    }
}

/// Default sweep grid: 5 log-spaced points across the protocol range.
pub fn default_lambda_grid() -> Vec<f64> {
    let (lo, hi) = PROTOCOL_LAMBDA_RANGE;
    let n = 5;
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            10f64.powf(lo.log10() + t * (hi.log10() - lo.log10()))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub couplings: Vec<f64>,
    /// Enforce the published hyperparameter ranges.
    pub protocol: bool,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            kind: "single".into(),
            seeds: vec![0, 1, 2],
            lambdas: default_lambda_grid(),
            couplings: vec![0.0, 1.0],
            protocol: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanFile {
    pub plan: PlanSection,
    pub base: FileConfig,
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(format!("plan: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub config: FileConfig,
    pub key: String,
}

fn cell_key(config: &FileConfig) -> Result<String> {
    let canon = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&canon);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Expand a plan into its (variant, seed) grid with fully resolved configs.
pub fn expand(plan: &PlanFile) -> Result<Vec<Cell>> {
    let kind = PlanKind::parse(&plan.plan.kind)?;
    if plan.plan.seeds.is_empty() {
        return Err(CoreError::Config("plan needs at least one seed".into()));
    }
    let mut variants: Vec<(String, FileConfig)> = Vec::new();
    match kind {
        PlanKind::Single => variants.push(("base".into(), plan.base.clone())),
        PlanKind::LambdaSweep => {
            if plan.plan.lambdas.is_empty() {
                return Err(CoreError::Config(
                    "lambda_sweep needs a non-empty lambdas list".into(),
                ));
            }
            for &l in &plan.plan.lambdas {
                if plan.plan.protocol
                    && !(PROTOCOL_LAMBDA_RANGE.0..=PROTOCOL_LAMBDA_RANGE.1).contains(&l)
                {
                    return Err(CoreError::Config(format!(
                        "lambda {l} outside the protocol log-grid range [{}, {}]",
                        PROTOCOL_LAMBDA_RANGE.0, PROTOCOL_LAMBDA_RANGE.1
                    )));
                }
                let mut cfg = plan.base.clone();
                cfg.schedule.lambda_target = l;
                variants.push((format!("lambda={l}"), cfg));
            }
        }
        PlanKind::AnnealAblation => {
            if plan.plan.protocol {
                let l = plan.base.schedule.lambda_target;
                if !(PROTOCOL_LAMBDA_RANGE.0..=PROTOCOL_LAMBDA_RANGE.1).contains(&l) {
                    return Err(CoreError::Config(format!(
                        "anneal_ablation lambda {l} outside the protocol range [{}, {}]",
                        PROTOCOL_LAMBDA_RANGE.0, PROTOCOL_LAMBDA_RANGE.1
                    )));
                }
            }
            for mode in ["annealed", "fixed"] {
                let mut cfg = plan.base.clone();
                cfg.schedule.mode = mode.into();
                variants.push((mode.into(), cfg));
            }
        }
        PlanKind::CouplingAblation => {
            if plan.plan.couplings.is_empty() {
                return Err(CoreError::Config(
                    "coupling_ablation needs a non-empty couplings list".into(),
                ));
            }
            for &w in &plan.plan.couplings {
                if w < 0.0 {
                    return Err(CoreError::Config(format!(
                        "coupling weight {w} must be >= 0"
                    )));
                }
                let mut cfg = plan.base.clone();
                cfg.coupling.weight = w;
                variants.push((format!("coupling={w}"), cfg));
            }
        }
        PlanKind::RobustnessProtocol => {
            let mut cfg = plan.base.clone();
            cfg.metrics.robustness = true;
            variants.push(("robustness".into(), cfg));
        }
    }

    let mut cells = Vec::new();
    for (label, cfg) in &variants {
        for &seed in &plan.plan.seeds {
            let mut resolved = cfg.clone();
            resolved.run.seed = seed;
            // fail fast on configs that would die inside a worker thread
            resolved.data_spec()?;
            resolved.model_config()?;
            resolved.train_config()?;
            let key = cell_key(&resolved)?;
            cells.push(Cell {
                variant: label.clone(),
                seed,
                config: resolved,
                key,
            });
        }
    }
    Ok(cells)
}

pub fn cell_dir(out: &Path, key: &str) -> PathBuf {
    out.join("cells").join(key)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Train one cell and persist its report + checkpoint. The report lands
/// last, so its presence marks the cell complete.
fn run_cell(cell: &Cell, out: &Path) -> Result<()> {
    let data_spec = cell.config.data_spec()?;
    let model_cfg = cell.config.model_config()?;
    let train_cfg = cell.config.train_config()?;
    let outcome = train(&data_spec, &model_cfg, &train_cfg)?;
    let dir = cell_dir(out, &cell.key);
    std::fs::create_dir_all(&dir)?;
    write_atomic(
        &dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&outcome.checkpoint)?.as_bytes(),
    )?;
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?.as_bytes(),
    )?;
    Ok(())
}

fn is_complete(cell: &Cell, out: &Path) -> bool {
    cell_dir(out, &cell.key).join("report.json").exists()
}

/// Run all pending cells, `jobs` at a time. Completed cells are skipped.
pub fn execute(cells: &[Cell], out: &Path, jobs: usize) -> Result<usize> {
    let pending: Vec<&Cell> = cells.iter().filter(|c| !is_complete(c, out)).collect();
    let ran = pending.len();
    if pending.is_empty() {
        return Ok(0);
    }
    std::fs::create_dir_all(out.join("cells"))?;
    let jobs = jobs.max(1).min(pending.len());
    if jobs == 1 {
        for cell in pending {
            run_cell(cell, out)?;
        }
        return Ok(ran);
    }
    let queue: Mutex<VecDeque<&Cell>> = Mutex::new(pending.into_iter().collect());
    let failures: Mutex<Vec<CoreError>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let cell = { queue.lock().unwrap().pop_front() };
                let Some(cell) = cell else { break };
                if let Err(e) = run_cell(cell, out) {
                    failures.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    match failures.is_empty() {
        true => Ok(ran),
        false => Err(failures.remove(0)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggBin {
    pub center: f64,
    pub mean_conf: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedCurve {
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub lambda_target: f64,
    pub coupling: f64,
    pub schedule_mode: ScheduleMode,
    pub seeds: Vec<u64>,
    pub cell_keys: Vec<String>,
    pub mean_accuracy: f64,
    pub mean_auc: Option<f64>,
    pub mean_ece: f64,
    pub mean_log_loss: f64,
    pub mean_active_fraction: f64,
    pub mean_expected_l0: f64,
    /// Minimum over seeds of clean test accuracy.
    pub worst: f64,
    pub rob_mu: Option<f64>,
    /// Raw seed-by-condition grid when the runs carried robustness evals.
    pub matrix: Option<RobustnessMatrix>,
    pub reliability: Vec<AggBin>,
    pub curves: Vec<SeedCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub version: u32,
    pub kind: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

/// One self-describing line per run for runs.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLine {
    pub cell: String,
    pub variant: String,
    pub seed: u64,
    pub lambda_target: f64,
    pub coupling: f64,
    pub schedule_mode: ScheduleMode,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub ece: f64,
    pub log_loss: f64,
    pub active_fraction: f64,
    pub expected_l0: f64,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub data_hash: String,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn summarize(
    label: &str,
    seeds: &[u64],
    keys: &[String],
    reports: &[RunReport],
) -> Result<VariantSummary> {
    let first = &reports[0];
    let accs: Vec<f64> = reports.iter().map(|r| r.test.accuracy).collect();
    let aucs: Vec<Option<f64>> = reports.iter().map(|r| r.test.auc).collect();
    let mean_auc = if aucs.iter().all(|a| a.is_some()) {
        Some(mean(&aucs.iter().map(|a| a.unwrap()).collect::<Vec<_>>()))
    } else {
        None
    };

    let matrix = if reports.iter().all(|r| r.robustness.is_some()) {
        let conditions = reports[0].robustness.as_ref().unwrap().conditions.clone();
        for r in reports {
            let rb = r.robustness.as_ref().unwrap();
            if rb.conditions != conditions {
                return Err(CoreError::Data(format!(
                    "variant {label}: robustness grids disagree across seeds"
                )));
            }
        }
        let m = RobustnessMatrix {
            conditions,
            seeds: seeds.to_vec(),
            values: reports
                .iter()
                .map(|r| r.robustness.as_ref().unwrap().accuracy.clone())
                .collect(),
        };
        m.validate()?;
        Some(m)
    } else {
        None
    };
    let rob_mu = matrix.as_ref().map(|m| m.rob_mu()).transpose()?;

    let bins = first.test.reliability.m;
    let mut reliability = Vec::with_capacity(bins);
    for b in 0..bins {
        let mut count = 0usize;
        let mut conf_w = 0.0;
        let mut acc_w = 0.0;
        for r in reports {
            let stat = &r.test.reliability.bins[b];
            count += stat.count;
            conf_w += stat.mean_conf * stat.count as f64;
            acc_w += stat.accuracy * stat.count as f64;
        }
        let (mean_conf, accuracy) = if count > 0 {
            (conf_w / count as f64, acc_w / count as f64)
        } else {
            (0.0, 0.0)
        };
        reliability.push(AggBin {
            center: (b as f64 + 0.5) / bins as f64,
            mean_conf,
            accuracy,
            count,
        });
    }

    Ok(VariantSummary {
        label: label.to_string(),
        lambda_target: first.lambda_target,
        coupling: first.coupling,
        schedule_mode: first.schedule_mode,
        seeds: seeds.to_vec(),
        cell_keys: keys.to_vec(),
        mean_accuracy: mean(&accs),
        mean_auc,
        mean_ece: mean(&reports.iter().map(|r| r.test.ece).collect::<Vec<_>>()),
        mean_log_loss: mean(&reports.iter().map(|r| r.test.log_loss).collect::<Vec<_>>()),
        mean_active_fraction: mean(
            &reports
                .iter()
                .map(|r| r.active_fraction)
                .collect::<Vec<_>>(),
        ),
        mean_expected_l0: mean(&reports.iter().map(|r| r.expected_l0).collect::<Vec<_>>()),
        worst: accs.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        rob_mu,
        matrix,
        reliability,
        curves: seeds
            .iter()
            .zip(reports)
            .map(|(&seed, r)| SeedCurve {
                seed,
                points: r.curve.clone(),
            })
            .collect(),
    })
}

/// Fold completed cells into the aggregate, write aggregate.json and
/// runs.jsonl, and hand the aggregate back. Missing cells fail with the
/// full list of absent (variant, seed) pairs.
pub fn aggregate(plan: &PlanFile, cells: &[Cell], out: &Path) -> Result<AggregateReport> {
    let kind = PlanKind::parse(&plan.plan.kind)?;
    let missing: Vec<String> = cells
        .iter()
        .filter(|c| !is_complete(c, out))
        .map(|c| format!("{}/seed={} ({})", c.variant, c.seed, c.key))
        .collect();
    if !missing.is_empty() {
        return Err(CoreError::IncompleteGrid(missing));
    }

    let mut loaded: Vec<(usize, RunReport)> = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let path = cell_dir(out, &cell.key).join("report.json");
        let bytes = std::fs::read(&path)
            .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
        loaded.push((i, serde_json::from_slice(&bytes)?));
    }

    // group by variant, preserving plan order
    let mut order: Vec<String> = Vec::new();
    for cell in cells {
        if !order.contains(&cell.variant) {
            order.push(cell.variant.clone());
        }
    }
    let mut variants = Vec::new();
    let mut lines = String::new();
    for label in &order {
        let mut seeds = Vec::new();
        let mut keys = Vec::new();
        let mut reports = Vec::new();
        for (i, report) in &loaded {
            let cell = &cells[*i];
            if &cell.variant == label {
                seeds.push(cell.seed);
                keys.push(cell.key.clone());
                reports.push(report.clone());
                let line = RunLine {
                    cell: cell.key.clone(),
                    variant: label.clone(),
                    seed: cell.seed,
                    lambda_target: report.lambda_target,
                    coupling: report.coupling,
                    schedule_mode: report.schedule_mode,
                    accuracy: report.test.accuracy,
                    auc: report.test.auc,
                    ece: report.test.ece,
                    log_loss: report.test.log_loss,
                    active_fraction: report.active_fraction,
                    expected_l0: report.expected_l0,
                    best_step: report.best_step,
                    best_val_loss: report.best_val_loss,
                    data_hash: report.data_hash.clone(),
                };
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
        }
        variants.push(summarize(label, &seeds, &keys, &reports)?);
    }

    let agg = AggregateReport {
        version: AGGREGATE_VERSION,
        kind: kind.name().to_string(),
        seeds: plan.plan.seeds.clone(),
        variants,
    };
    write_atomic(&out.join("runs.jsonl"), lines.as_bytes())?;
    write_atomic(
        &out.join("aggregate.json"),
        serde_json::to_string_pretty(&agg)?.as_bytes(),
    )?;
    Ok(agg)
}

/// Expand, execute pending cells, aggregate.
pub fn run_plan(plan: &PlanFile, out: &Path, jobs: usize) -> Result<AggregateReport> {
    let cells = expand(plan)?;
    std::fs::create_dir_all(out)?;
    execute(&cells, out, jobs)?;
    aggregate(plan, &cells, out)
}

pub fn load_aggregate(dir: &Path) -> Result<AggregateReport> {
    let path = dir.join("aggregate.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
