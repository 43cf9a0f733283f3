//! Training loop, evaluation, and checkpoints.
//!
//! One loop serves all backbones: sample a batch, run a stochastic forward
//! with gates open, minimize task loss + lambda * expected L0 (+ optional
//! calibration coupling), and anneal lambda/tau per the schedule. Validation
//! uses deterministic gates and task loss only; the best-validation snapshot
//! is what gets evaluated and checkpointed. Adam moments are not part of a
//! checkpoint, so checkpoints restore models for inference, not mid-run
//! optimizer state.

use crate::backbones::graph::{gcn_operator, mean_operator, GraphKind, GraphModel, GraphSpec};
use crate::backbones::integrated::{ForwardMode, GateAttach, IntegratedModel, IntegratedSpec};
use crate::backbones::text::{TextModel, TextSpec};
use crate::backbones::{binary_log_loss, cross_entropy, total_objective};
use crate::datasets::{
    load_adult_split, split_indices, synthetic_graph, synthetic_tabular, synthetic_text,
    GraphDataset, SyntheticGraphSpec, SyntheticTabularSpec, SyntheticTextSpec, TabularDataset,
    TextDataset,
};
use crate::error::{CoreError, Result};
use crate::gate::{Gate, GateConstants};
use crate::metrics::{
    accuracy_binary, auc, log_loss, reliability_binary, reliability_multiclass, soft_ece_penalty,
    ReliabilityReport,
};
use crate::optim::{apply_weight_decay, Adam};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::robustness::{apply_perturbation, protocol_grid, FeatureStats};
use crate::schedule::{Schedule, ScheduleMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
const DIVERGE_LIMIT: f64 = 1e8;
const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Cin,
    Gcn,
    Sage,
    Text,
}

impl Backbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cin" => Ok(Backbone::Cin),
            "gcn" => Ok(Backbone::Gcn),
            "sage" => Ok(Backbone::Sage),
            "text" => Ok(Backbone::Text),
            other => Err(CoreError::Config(format!(
                "unknown backbone {other:?} (expected cin, gcn, sage, or text)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Cin => "cin",
            Backbone::Gcn => "gcn",
            Backbone::Sage => "sage",
            Backbone::Text => "text",
        }
    }
}

/// Backbone hyperparameters. One flat struct covers all backbones; fields
/// that do not apply to the chosen backbone are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub embed_init_std: f64,
    pub cin_widths: Vec<usize>,
    pub cin_rank: Option<usize>,
    pub deep_widths: Vec<usize>,
    pub dropout: f64,
    /// Graph backbone layer widths.
    pub hidden: Vec<usize>,
    pub attach: GateAttach,
    pub gate: GateConstants,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
    /// Whether graph/text backbones carry a gate at all.
    pub gated: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Cin,
            embed_dim: 4,
            embed_init_std: 0.1,
            cin_widths: vec![4, 4],
            cin_rank: None,
            deep_widths: vec![32, 16],
            dropout: 0.0,
            hidden: vec![16],
            attach: GateAttach::EmbeddingConcat,
            gate: GateConstants::default(),
            alpha_init_mean: 2.0,
            alpha_init_std: 0.1,
            gated: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Adult {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        split: Option<String>,
    },
    SyntheticTabular(SyntheticTabularSpec),
    SyntheticGraph(SyntheticGraphSpec),
    SyntheticText(SyntheticTextSpec),
}

impl DataSpec {
    pub fn load(&self) -> Result<TaskData> {
        match self {
            DataSpec::Adult { path, split } => Ok(TaskData::Tabular(load_adult_split(
                Path::new(path),
                split.as_ref().map(Path::new),
            )?)),
            DataSpec::SyntheticTabular(s) => Ok(TaskData::Tabular(synthetic_tabular(s)?)),
            DataSpec::SyntheticGraph(s) => Ok(TaskData::Graph(synthetic_graph(s)?)),
            DataSpec::SyntheticText(s) => Ok(TaskData::Text(synthetic_text(s)?)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Tabular(TabularDataset),
    Graph(GraphDataset),
    Text(TextDataset),
}

impl TaskData {
    pub fn train_idx(&self) -> &[usize] {
        match self {
            TaskData::Tabular(d) => &d.train_idx,
            TaskData::Graph(d) => &d.train_idx,
            TaskData::Text(d) => &d.train_idx,
        }
    }

    pub fn test_idx(&self) -> &[usize] {
        match self {
            TaskData::Tabular(d) => &d.test_idx,
            TaskData::Graph(d) => &d.test_idx,
            TaskData::Text(d) => &d.test_idx,
        }
    }

    pub fn hash(&self) -> &str {
        match self {
            TaskData::Tabular(d) => &d.hash,
            TaskData::Graph(d) => &d.hash,
            TaskData::Text(d) => &d.hash,
        }
    }

    pub fn is_binary(&self) -> bool {
        !matches!(self, TaskData::Graph(_))
    }
}

pub enum TaskModel {
    Tabular(IntegratedModel),
    Graph { model: GraphModel, operator: Tensor },
    Text(TextModel),
}

pub fn build_model(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    data: &TaskData,
    rng: &mut RngStream,
) -> Result<TaskModel> {
    match (cfg.backbone, data) {
        (Backbone::Cin, TaskData::Tabular(d)) => {
            let spec = IntegratedSpec {
                vocab_sizes: &d.vocab_sizes,
                embed_dim: cfg.embed_dim,
                embed_init_std: cfg.embed_init_std,
                cin_widths: &cfg.cin_widths,
                cin_rank: cfg.cin_rank,
                deep_widths: &cfg.deep_widths,
                dropout: cfg.dropout,
                attach: if cfg.gated {
                    cfg.attach
                } else {
                    GateAttach::None
                },
                gate_constants: cfg.gate,
                alpha_init_mean: cfg.alpha_init_mean,
                alpha_init_std: cfg.alpha_init_std,
            };
            Ok(TaskModel::Tabular(IntegratedModel::new(store, &spec, rng)?))
        }
        (Backbone::Gcn | Backbone::Sage, TaskData::Graph(d)) => {
            let kind = if cfg.backbone == Backbone::Gcn {
                GraphKind::Gcn
            } else {
                GraphKind::Sage
            };
            let spec = GraphSpec {
                kind,
                in_dim: d.features.shape()[1],
                hidden: &cfg.hidden,
                classes: d.classes,
                gated: cfg.gated,
                gate_constants: cfg.gate,
                alpha_init_mean: cfg.alpha_init_mean,
                alpha_init_std: cfg.alpha_init_std,
            };
            let model = GraphModel::new(store, &spec, rng)?;
            let operator = match kind {
                GraphKind::Gcn => gcn_operator(d.n, &d.edges)?,
                GraphKind::Sage => mean_operator(d.n, &d.edges)?,
            };
            Ok(TaskModel::Graph { model, operator })
        }
        (Backbone::Text, TaskData::Text(d)) => {
            let spec = TextSpec {
                vocab: d.vocab,
                dim: cfg.embed_dim,
                embed_init_std: cfg.embed_init_std,
                gated: cfg.gated,
                gate_constants: cfg.gate,
                alpha_init_mean: cfg.alpha_init_mean,
                alpha_init_std: cfg.alpha_init_std,
            };
            Ok(TaskModel::Text(TextModel::new(store, &spec, rng)?))
        }
        (b, _) => Err(CoreError::Config(format!(
            "backbone {} does not match the provided data kind",
            b.name()
        ))),
    }
}

impl TaskModel {
    pub fn gates(&self) -> Vec<&Gate> {
        match self {
            TaskModel::Tabular(m) => m.gates(),
            TaskModel::Graph { model, .. } => model.gates(),
            TaskModel::Text(m) => m.gates(),
        }
    }

    /// Mean task loss on `idx`, plus the probability vector when the head
    /// is binary (the calibration coupling needs it on-tape).
    pub fn train_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        data: &TaskData,
        idx: &[usize],
        mut mode: ForwardMode,
    ) -> Result<(Var, Option<Var>)> {
        match (self, data) {
            (TaskModel::Tabular(m), TaskData::Tabular(d)) => {
                let probs = m.forward(tape, store, &d.rows, idx, mode)?;
                let labels: Vec<bool> = idx.iter().map(|&i| d.labels[i]).collect();
                let loss = binary_log_loss(tape, probs, &labels)?;
                Ok((loss, Some(probs)))
            }
            (TaskModel::Graph { model, operator }, TaskData::Graph(d)) => {
                let z = match &mut mode {
                    ForwardMode::Train { tau, gate_rng, .. } => match &model.gate {
                        Some(g) => Some(g.sample_train(tape, store, *tau, gate_rng)?),
                        None => None,
                    },
                    _ => None,
                };
                let f = tape.constant(d.features.clone());
                let logits = model.logits(tape, store, f, operator, z)?;
                let batch_logits = tape.gather_rows(logits, idx)?;
                let labels: Vec<usize> = idx.iter().map(|&i| d.labels[i]).collect();
                let loss = cross_entropy(tape, batch_logits, &labels)?;
                Ok((loss, None))
            }
            (TaskModel::Text(m), TaskData::Text(d)) => {
                let z = match &mut mode {
                    ForwardMode::Train { tau, gate_rng, .. } => match &m.gate {
                        Some(g) => Some(g.sample_train(tape, store, *tau, gate_rng)?),
                        None => None,
                    },
                    _ => None,
                };
                let probs = m.forward(tape, store, &d.seqs, idx, z)?;
                let labels: Vec<bool> = idx.iter().map(|&i| d.labels[i]).collect();
                let loss = binary_log_loss(tape, probs, &labels)?;
                Ok((loss, Some(probs)))
            }
            _ => Err(CoreError::Config("model and data kinds disagree".into())),
        }
    }

    /// Deterministic predictions on `idx` (chunked to bound tape size).
    pub fn predictions(
        &self,
        store: &ParamStore,
        data: &TaskData,
        idx: &[usize],
    ) -> Result<Predictions> {
        match (self, data) {
            (TaskModel::Tabular(m), TaskData::Tabular(d)) => {
                let mut probs = Vec::with_capacity(idx.len());
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    probs.extend(m.predict(store, &d.rows, chunk)?);
                }
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Binary { probs, labels })
            }
            (TaskModel::Graph { model, operator }, TaskData::Graph(d)) => {
                let all = model.predict(store, &d.features, operator)?;
                let probs = gather_tensor_rows(&all, idx)?;
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Multiclass { probs, labels })
            }
            (TaskModel::Text(m), TaskData::Text(d)) => {
                let mut probs = Vec::with_capacity(idx.len());
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    probs.extend(m.predict(store, &d.seqs, chunk)?);
                }
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Binary { probs, labels })
            }
            _ => Err(CoreError::Config("model and data kinds disagree".into())),
        }
    }

    /// The representation the perturbation protocol acts on, for `idx` rows
    /// (graph backbones expose raw node features over the whole graph).
    fn clean_representation(
        &self,
        store: &ParamStore,
        data: &TaskData,
        idx: &[usize],
    ) -> Result<Tensor> {
        match (self, data) {
            (TaskModel::Tabular(m), TaskData::Tabular(d)) => {
                let mut parts = Vec::new();
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    parts.push(m.interface_values(store, &d.rows, chunk)?);
                }
                concat_rows(&parts)
            }
            (TaskModel::Graph { .. }, TaskData::Graph(d)) => Ok(d.features.clone()),
            (TaskModel::Text(m), TaskData::Text(d)) => {
                let mut parts = Vec::new();
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    parts.push(m.pooled_values(store, &d.seqs, chunk)?);
                }
                concat_rows(&parts)
            }
            _ => Err(CoreError::Config("model and data kinds disagree".into())),
        }
    }

    /// Predictions for `idx` given an already-perturbed representation
    /// (rows of `rep` aligned with `idx`; whole-graph features for graphs).
    fn predictions_from_representation(
        &self,
        store: &ParamStore,
        data: &TaskData,
        idx: &[usize],
        rep: &Tensor,
    ) -> Result<Predictions> {
        match (self, data) {
            (TaskModel::Tabular(m), TaskData::Tabular(d)) => {
                let mut probs = Vec::with_capacity(idx.len());
                let mut lo = 0;
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    let e = slice_rows(rep, lo, lo + chunk.len())?;
                    probs.extend(m.predict_from_interface(store, &e, &d.rows, chunk)?);
                    lo += chunk.len();
                }
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Binary { probs, labels })
            }
            (TaskModel::Graph { model, operator }, TaskData::Graph(d)) => {
                let all = model.predict(store, rep, operator)?;
                let probs = gather_tensor_rows(&all, idx)?;
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Multiclass { probs, labels })
            }
            (TaskModel::Text(m), TaskData::Text(d)) => {
                let mut probs = Vec::with_capacity(idx.len());
                let mut lo = 0;
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    let p = slice_rows(rep, lo, lo + chunk.len())?;
                    probs.extend(m.predict_from_pooled(store, &p)?);
                    lo += chunk.len();
                }
                let labels = idx.iter().map(|&i| d.labels[i]).collect();
                Ok(Predictions::Binary { probs, labels })
            }
            _ => Err(CoreError::Config("model and data kinds disagree".into())),
        }
    }
}

fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 2 || hi > shape[0] || lo > hi {
        return Err(CoreError::InvalidArg(format!(
            "row slice {lo}..{hi} outside matrix of {} rows",
            shape[0]
        )));
    }
    let cols = shape[1];
    Tensor::new(vec![hi - lo, cols], t.data()[lo * cols..hi * cols].to_vec())
}

fn gather_tensor_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        if i >= t.shape()[0] {
            return Err(CoreError::InvalidArg(format!(
                "row {i} outside {} rows",
                t.shape()[0]
            )));
        }
        data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![idx.len(), cols], data)
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(CoreError::InvalidArg("no rows to concatenate".into()));
    }
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

pub enum Predictions {
    Binary { probs: Vec<f64>, labels: Vec<bool> },
    Multiclass { probs: Tensor, labels: Vec<usize> },
}

impl Predictions {
    pub fn accuracy(&self) -> Result<f64> {
        match self {
            Predictions::Binary { probs, labels } => accuracy_binary(probs, labels, 0.5),
            Predictions::Multiclass { probs, labels } => {
                let c = probs.shape()[1];
                let hits = labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &y)| argmax(&probs.data()[i * c..(i + 1) * c]) == y)
                    .count();
                Ok(hits as f64 / labels.len() as f64)
            }
        }
    }

    pub fn auc(&self) -> Result<Option<f64>> {
        match self {
            Predictions::Binary { probs, labels } => Ok(Some(auc(probs, labels)?)),
            Predictions::Multiclass { .. } => Ok(None),
        }
    }

    pub fn reliability(&self, bins: usize) -> Result<ReliabilityReport> {
        match self {
            Predictions::Binary { probs, labels } => reliability_binary(probs, labels, bins),
            Predictions::Multiclass { probs, labels } => {
                reliability_multiclass(probs, labels, bins)
            }
        }
    }

    pub fn log_loss(&self) -> Result<f64> {
        match self {
            Predictions::Binary { probs, labels } => log_loss(probs, labels),
            Predictions::Multiclass { probs, labels } => {
                let c = probs.shape()[1];
                let total: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| -(probs.data()[i * c + y].max(1e-12).ln()))
                    .sum();
                Ok(total / labels.len() as f64)
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Predictions::Binary { labels, .. } => labels.len(),
            Predictions::Multiclass { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the train split carved off for validation.
    pub val_frac: f64,
    /// Steps between validation passes.
    pub eval_every: usize,
    pub schedule: Schedule,
    /// Calibration coupling coefficient; binary heads only.
    pub coupling: f64,
    pub coupling_bins: usize,
    pub coupling_bandwidth: f64,
    /// Reliability bins for reported metrics.
    pub metric_bins: usize,
    pub robustness: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(self.val_frac > 0.0 && self.val_frac <= 0.5) {
            return Err(CoreError::Config(format!(
                "val_frac {} must lie in (0, 0.5]",
                self.val_frac
            )));
        }
        if self.eval_every == 0 {
            return Err(CoreError::Config("eval_every must be >= 1".into()));
        }
        if self.coupling < 0.0 {
            return Err(CoreError::Config(format!(
                "coupling {} must be >= 0",
                self.coupling
            )));
        }
        if self.coupling > 0.0 && (self.coupling_bins == 0 || self.coupling_bandwidth <= 0.0) {
            return Err(CoreError::Config(
                "coupling needs coupling_bins >= 1 and coupling_bandwidth > 0".into(),
            ));
        }
        if self.metric_bins == 0 {
            return Err(CoreError::Config("metric_bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.schedule.total_steps
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-5,
            val_frac: 0.1,
            eval_every: 200,
            schedule: Schedule::new(ScheduleMode::Annealed, 2000, 0.4, 1e-3, 2.0 / 3.0, 0.1)
                .expect("default schedule is valid"),
            coupling: 0.0,
            coupling_bins: 10,
            coupling_bandwidth: 0.05,
            metric_bins: 10,
            robustness: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub ece: f64,
    pub log_loss: f64,
    pub reliability: ReliabilityReport,
}

pub fn evaluate(preds: &Predictions, bins: usize) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(CoreError::InvalidArg("evaluation set is empty".into()));
    }
    let reliability = preds.reliability(bins)?;
    Ok(EvalReport {
        n: preds.len(),
        accuracy: preds.accuracy()?,
        auc: preds.auc()?,
        ece: reliability.ece,
        log_loss: preds.log_loss()?,
        reliability,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub conditions: Vec<String>,
    pub accuracy: Vec<f64>,
}

/// Accuracy on `idx` under every protocol condition. Feature statistics are
/// frozen from the clean representation; each condition draws noise from a
/// stream keyed only by seed and condition label, so results do not depend
/// on evaluation order or backbone.
pub fn evaluate_robustness(
    model: &TaskModel,
    store: &ParamStore,
    data: &TaskData,
    idx: &[usize],
    seed: u64,
) -> Result<RobustnessReport> {
    let clean = model.clean_representation(store, data, idx)?;
    let stats = FeatureStats::from_batch(&clean)?;
    let perturb_root = RngStream::new(seed).substream("perturb");
    let mut conditions = Vec::new();
    let mut accuracy = Vec::new();
    for kind in protocol_grid() {
        let label = kind.label();
        let mut rng = perturb_root.substream(&label);
        let perturbed = apply_perturbation(&clean, kind, &stats, &mut rng)?;
        let preds = model.predictions_from_representation(store, data, idx, &perturbed)?;
        accuracy.push(preds.accuracy()?);
        conditions.push(label);
    }
    Ok(RobustnessReport {
        conditions,
        accuracy,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lambda: f64,
    pub tau: f64,
    pub active_fraction: f64,
    pub expected_l0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateReport {
    pub name: String,
    pub dim: usize,
    pub active: usize,
    pub active_fraction: f64,
    pub expected_l0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub seed: u64,
    pub backbone: Backbone,
    pub data_hash: String,
    pub schedule_mode: ScheduleMode,
    pub lambda_target: f64,
    pub coupling: f64,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub test: EvalReport,
    pub robustness: Option<RobustnessReport>,
    /// Fraction of gated dimensions open at the deterministic threshold.
    pub active_fraction: f64,
    pub expected_l0: f64,
    pub gates: Vec<GateReport>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub val_loss: f64,
    pub data: DataSpec,
    pub data_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CoreError::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model and load stored parameters. `data_override`
    /// substitutes a different source (the eval command's --data); parameter
    /// shapes still have to line up with whatever that source yields.
    pub fn rebuild(
        &self,
        data_override: Option<&DataSpec>,
    ) -> Result<(ParamStore, TaskModel, TaskData)> {
        let spec = data_override.unwrap_or(&self.data);
        let data = spec.load()?;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(self.seed).substream("init");
        let model = build_model(&mut store, &self.model, &data, &mut rng)?;
        let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
        for name in &names {
            let stored = self.params.get(name).ok_or_else(|| {
                CoreError::Data(format!("checkpoint is missing parameter {name:?}"))
            })?;
            store.load_named(name, stored)?;
        }
        if self.params.len() != names.len() {
            let extra: Vec<&String> = self.params.keys().filter(|k| !names.contains(k)).collect();
            return Err(CoreError::Data(format!(
                "checkpoint carries parameters the model does not have: {extra:?}"
            )));
        }
        Ok((store, model, data))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

struct Batcher {
    pool: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl Batcher {
    fn new(pool: Vec<usize>, rng: RngStream) -> Self {
        Batcher {
            pool,
            cursor: usize::MAX,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> &[usize] {
        if self.cursor == usize::MAX || self.cursor + size > self.pool.len() {
            self.rng.shuffle(&mut self.pool);
            self.cursor = 0;
        }
        let b = &self.pool[self.cursor..self.cursor + size];
        self.cursor += size;
        b
    }
}

fn gate_summary(
    gates: &[&Gate],
    store: &ParamStore,
    tau: f64,
) -> Result<(f64, f64, Vec<GateReport>)> {
    let mut reports = Vec::new();
    let mut total_dim = 0usize;
    let mut total_active = 0usize;
    let mut total_l0 = 0.0;
    for g in gates {
        let mask = g.deterministic_mask(store);
        let active = mask.data().iter().filter(|&&z| z > 0.0).count();
        let l0 = g.expected_l0_value(store, tau)?;
        total_dim += mask.numel();
        total_active += active;
        total_l0 += l0;
        reports.push(GateReport {
            name: store.name(g.alpha).to_string(),
            dim: mask.numel(),
            active,
            active_fraction: active as f64 / mask.numel() as f64,
            expected_l0: l0,
        });
    }
    let fraction = if total_dim == 0 {
        1.0
    } else {
        total_active as f64 / total_dim as f64
    };
    Ok((fraction, total_l0, reports))
}

/// Run the full loop and return the report plus a checkpoint of the
/// best-validation parameters.
pub fn train(
    data_spec: &DataSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = data_spec.load()?;
    let root = RngStream::new(cfg.seed);

    let mut store = ParamStore::new();
    let mut init_rng = root.substream("init");
    let model = build_model(&mut store, model_cfg, &data, &mut init_rng)?;
    let gates = model.gates();

    let mut val_rng = root.substream("valsplit");
    let (train_pool, val_pool) = split_indices(data.train_idx(), cfg.val_frac, &mut val_rng);
    if train_pool.len() < cfg.batch_size {
        return Err(CoreError::Config(format!(
            "batch_size {} exceeds the {}-row train pool",
            cfg.batch_size,
            train_pool.len()
        )));
    }
    if val_pool.is_empty() {
        return Err(CoreError::Config("validation pool came out empty".into()));
    }

    let mut batcher = Batcher::new(train_pool, root.substream("batch"));
    let mut gate_rng = root.substream("gate");
    let mut dropout_rng = root.substream("dropout");
    let mut adam = Adam::with_defaults(cfg.lr)?;

    let steps = cfg.steps();
    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut best_snap = store.snapshot();
    let mut last_train_loss = f64::NAN;

    for t in 1..=steps {
        let lambda_t = cfg.schedule.lambda_at(t)?;
        let tau_t = cfg.schedule.tau_at(t)?;
        let batch: Vec<usize> = batcher.next(cfg.batch_size).to_vec();

        let mut tape = Tape::new();
        let mode = ForwardMode::Train {
            tau: tau_t,
            gate_rng: &mut gate_rng,
            dropout_rng: &mut dropout_rng,
        };
        let (task, probs) = model.train_loss(&mut tape, &store, &data, &batch, mode)?;
        let mut objective = total_objective(&mut tape, &store, task, &gates, lambda_t, tau_t)?;
        if cfg.coupling > 0.0 {
            if let Some(p) = probs {
                let labels: Vec<bool> = match &data {
                    TaskData::Tabular(d) => batch.iter().map(|&i| d.labels[i]).collect(),
                    TaskData::Text(d) => batch.iter().map(|&i| d.labels[i]).collect(),
                    TaskData::Graph(_) => unreachable!("graph heads yield no probability vector"),
                };
                let pen = soft_ece_penalty(
                    &mut tape,
                    p,
                    &labels,
                    cfg.coupling_bins,
                    cfg.coupling_bandwidth,
                )?;
                let scaled = tape.affine(pen, cfg.coupling, 0.0)?;
                objective = tape.add(objective, scaled)?;
            }
        }

        let j = tape.value(objective).item()?;
        if !j.is_finite() || j.abs() > DIVERGE_LIMIT {
            return Err(CoreError::Diverged {
                step: t,
                last_loss: j,
            });
        }
        last_train_loss = j;

        tape.backward(objective)?;
        store.absorb_grads(&tape)?;
        apply_weight_decay(&mut store, cfg.weight_decay);
        adam.step(&mut store)?;

        if t % cfg.eval_every == 0 || t == steps {
            let val_preds = model.predictions(&store, &data, &val_pool)?;
            let val_loss = val_preds.log_loss()?;
            if !val_loss.is_finite() {
                return Err(CoreError::Diverged {
                    step: t,
                    last_loss: val_loss,
                });
            }
            let (frac, l0, _) = gate_summary(&gates, &store, tau_t)?;
            curve.push(CurvePoint {
                step: t,
                train_loss: j,
                val_loss,
                lambda: lambda_t,
                tau: tau_t,
                active_fraction: frac,
                expected_l0: l0,
            });
            if val_loss < best_val {
                best_val = val_loss;
                best_step = t;
                best_snap = store.snapshot();
            }
        }
    }

    store.restore(&best_snap)?;

    let test_preds = model.predictions(&store, &data, data.test_idx())?;
    let test = evaluate(&test_preds, cfg.metric_bins)?;
    let robustness = if cfg.robustness {
        Some(evaluate_robustness(
            &model,
            &store,
            &data,
            data.test_idx(),
            cfg.seed,
        )?)
    } else {
        None
    };
    let (active_fraction, expected_l0, gate_reports) =
        gate_summary(&gates, &store, cfg.schedule.tau_end)?;

    let params: BTreeMap<String, Tensor> = store
        .entries()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        step: best_step,
        val_loss: best_val,
        data: data_spec.clone(),
        data_hash: data.hash().to_string(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        params,
    };
    let report = RunReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        backbone: model_cfg.backbone,
        data_hash: data.hash().to_string(),
        schedule_mode: cfg.schedule.mode,
        lambda_target: cfg.schedule.lambda_target,
        coupling: cfg.coupling,
        steps,
        best_step,
        best_val_loss: best_val,
        final_train_loss: last_train_loss,
        test,
        robustness,
        active_fraction,
        expected_l0,
        gates: gate_reports,
        curve,
    };
    Ok(TrainOutcome { report, checkpoint })
}
