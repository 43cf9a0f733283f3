//! Bag-of-embedding text classifier: token embeddings mean-pooled per
//! sequence, linear sigmoid head. The pooled vector is the interface the
//! gate (and the perturbation protocol) sees.

use crate::error::{CoreError, Result};
use crate::gate::{Gate, GateConstants};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TextModel {
    pub embed: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub gate: Option<Gate>,
    pub vocab: usize,
    pub dim: usize,
}

pub struct TextSpec {
    pub vocab: usize,
    pub dim: usize,
    pub embed_init_std: f64,
    pub gated: bool,
    pub gate_constants: GateConstants,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
}

impl TextModel {
    pub fn new(store: &mut ParamStore, spec: &TextSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.vocab == 0 || spec.dim == 0 {
            return Err(CoreError::InvalidArg(format!(
                "text model needs vocab and dim > 0, got {} / {}",
                spec.vocab, spec.dim
            )));
        }
        let embed = store.add(
            "text.embed",
            Tensor::randn(vec![spec.vocab, spec.dim], 0.0, spec.embed_init_std, rng),
        );
        let std = (1.0 / spec.dim as f64).sqrt();
        let w = store.add("text.w", Tensor::randn(vec![spec.dim, 1], 0.0, std, rng));
        let b = store.add("text.b", Tensor::zeros(vec![1]));
        let gate = if spec.gated {
            Some(Gate::new(
                store,
                "gate.pooled",
                spec.dim,
                spec.gate_constants,
                spec.alpha_init_mean,
                spec.alpha_init_std,
                rng,
            )?)
        } else {
            None
        };
        Ok(TextModel {
            embed,
            w,
            b,
            gate,
            vocab: spec.vocab,
            dim: spec.dim,
        })
    }

    /// Mean-pooled embeddings [B, dim] for the selected sequences. Empty
    /// sequences have no mean and are rejected up front.
    pub fn pooled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Var> {
        if idx.is_empty() {
            return Err(CoreError::InvalidArg("text batch is empty".into()));
        }
        let table = store.leaf_on(tape, self.embed);
        let mut rows = Vec::with_capacity(idx.len());
        for &i in idx {
            let seq = seqs.get(i).ok_or_else(|| {
                CoreError::InvalidArg(format!(
                    "sequence index {i} out of range for {}",
                    seqs.len()
                ))
            })?;
            if seq.is_empty() {
                return Err(CoreError::Data(format!(
                    "sequence {i} is empty, cannot pool"
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.vocab) {
                return Err(CoreError::Data(format!(
                    "sequence {i}: token {bad} outside vocabulary of {}",
                    self.vocab
                )));
            }
            let toks = tape.gather_rows(table, seq)?;
            let mean = tape.mean_axis(toks, 0)?;
            rows.push(tape.reshape(mean, vec![1, self.dim])?);
        }
        tape.concat(&rows, 0)
    }

    pub fn pooled_values(
        &self,
        store: &ParamStore,
        seqs: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.pooled(&mut tape, store, seqs, idx)?;
        Ok(tape.value(p).clone())
    }

    /// Head over pooled values already on the tape; applies the gate.
    pub fn forward_from_pooled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: Var,
        gate_z: Option<Var>,
    ) -> Result<Var> {
        let shape = tape.value(pooled).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(CoreError::ShapeMismatch {
                op: "text_forward",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let b = shape[0];
        let mut h = pooled;
        if let Some(gate) = &self.gate {
            let z = match gate_z {
                Some(z) => z,
                None => gate.deterministic_on(tape, store),
            };
            h = gate.apply(tape, h, z)?;
        }
        let w = store.leaf_on(tape, self.w);
        let bias = store.leaf_on(tape, self.b);
        let score = tape.matmul(h, w)?;
        let logit = tape.add(score, bias)?;
        let p = tape.sigmoid(logit)?;
        tape.reshape(p, vec![b])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[Vec<usize>],
        idx: &[usize],
        gate_z: Option<Var>,
    ) -> Result<Var> {
        let pooled = self.pooled(tape, store, seqs, idx)?;
        self.forward_from_pooled(tape, store, pooled, gate_z)
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        seqs: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, store, seqs, idx, None)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn predict_from_pooled(&self, store: &ParamStore, pooled: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = tape.constant(pooled.clone());
        let p = self.forward_from_pooled(&mut tape, store, pv, None)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn gates(&self) -> Vec<&Gate> {
        self.gate.iter().collect()
    }
}
