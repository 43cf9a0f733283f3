//! Plot-data emission: flat tab-separated files with `#`-prefixed headers
//! documenting the columns. No rendering; any plotting tool can consume
//! them. Floats print in shortest round-trip form so files parse back to
//! the exact aggregate values.

use crate::error::{CoreError, Result};
use crate::runner::AggregateReport;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitKind {
    Pareto,
    Reliability,
    LearningCurve,
}

impl EmitKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pareto" => Ok(EmitKind::Pareto),
            "reliability" => Ok(EmitKind::Reliability),
            "learning_curve" => Ok(EmitKind::LearningCurve),
            other => Err(CoreError::InvalidArg(format!(
                "unknown emit kind {other:?} (expected pareto, reliability, or learning_curve)"
            ))),
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            EmitKind::Pareto => "pareto.tsv",
            EmitKind::Reliability => "reliability.tsv",
            EmitKind::LearningCurve => "learning_curve.tsv",
        }
    }
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".into(),
    }
}

/// Accuracy-versus-sparsity frontier, one row per variant, ordered by
/// active fraction.
fn emit_pareto(agg: &AggregateReport) -> String {
    let mut s = String::new();
    s.push_str("# pareto frontier: predictive metric vs gate sparsity, one row per variant\n");
    s.push_str("# columns: variant\tlambda\tactive_fraction\taccuracy\tauc\tece\tworst\n");
    let mut rows: Vec<_> = agg.variants.iter().collect();
    rows.sort_by(|a, b| {
        a.mean_active_fraction
            .partial_cmp(&b.mean_active_fraction)
            .expect("active fractions are finite")
    });
    for v in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            v.label,
            v.lambda_target,
            v.mean_active_fraction,
            v.mean_accuracy,
            opt(v.mean_auc),
            v.mean_ece,
            v.worst
        ));
    }
    s
}

/// Seed-pooled reliability diagram rows per variant.
fn emit_reliability(agg: &AggregateReport) -> String {
    let mut s = String::new();
    s.push_str("# reliability diagram bins, pooled over seeds per variant\n");
    s.push_str("# columns: variant\tbin_center\tmean_conf\taccuracy\tcount\n");
    for v in &agg.variants {
        for b in &v.reliability {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                v.label, b.center, b.mean_conf, b.accuracy, b.count
            ));
        }
    }
    s
}

/// Per-seed validation-cadence series; step is monotone within a
/// (variant, seed) group.
fn emit_learning_curve(agg: &AggregateReport) -> String {
    let mut s = String::new();
    s.push_str("# learning curves at validation cadence\n");
    s.push_str(
        "# columns: variant\tseed\tstep\ttrain_loss\tval_loss\tlambda\ttau\tactive_fraction\texpected_l0\n",
    );
    for v in &agg.variants {
        for c in &v.curves {
            for p in &c.points {
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    v.label,
                    c.seed,
                    p.step,
                    p.train_loss,
                    p.val_loss,
                    p.lambda,
                    p.tau,
                    p.active_fraction,
                    p.expected_l0
                ));
            }
        }
    }
    s
}

pub fn emit(agg: &AggregateReport, kind: EmitKind) -> String {
    match kind {
        EmitKind::Pareto => emit_pareto(agg),
        EmitKind::Reliability => emit_reliability(agg),
        EmitKind::LearningCurve => emit_learning_curve(agg),
    }
}

/// Write the plot file next to the aggregate and return its path.
pub fn write_emit(agg: &AggregateReport, kind: EmitKind, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(kind.file_name());
    std::fs::write(&path, emit(agg, kind))?;
    Ok(path)
}

/// Data rows of an emitted file (headers stripped), split on tabs.
pub fn parse_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}
