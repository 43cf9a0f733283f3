//! Integrated tabular predictor: linear + deep + CIN branches over shared
//! field embeddings, sigmoid head over the summed branch scores.
//!
//! The classifier-facing interface is the flattened embedding concatenation
//! e = [B, m*D]. A gate can sit directly on e (the default) or on the joint
//! head input p+ || x_dnn; the linear branch reads raw field indices and is
//! not gated.

use crate::backbones::cin::Cin;
use crate::backbones::embedding::FieldEmbeddings;
use crate::backbones::Mlp;
use crate::error::{CoreError, Result};
use crate::gate::{Gate, GateConstants};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAttach {
    None,
    /// Gate the flattened embedding concatenation (m*D dims).
    EmbeddingConcat,
    /// Gate the joint head input p+ || x_dnn.
    HeadInput,
}

/// How a forward pass treats stochastic pieces.
pub enum ForwardMode<'a> {
    /// Sampled gates at temperature tau, dropout active.
    Train {
        tau: f64,
        gate_rng: &'a mut RngStream,
        dropout_rng: &'a mut RngStream,
    },
    /// Sampled gate with caller-supplied noise, no dropout. Exists so
    /// gradient checks can hold the noise fixed across evaluations.
    FrozenNoise { tau: f64, noise: &'a Tensor },
    /// Deterministic binary masks, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
pub struct IntegratedModel {
    pub embeddings: FieldEmbeddings,
    pub linear_tables: Vec<ParamId>,
    pub cin: Cin,
    pub deep: Mlp,
    pub w_cin: ParamId,
    pub w_dnn: ParamId,
    pub bias: ParamId,
    pub gate: Option<Gate>,
    pub attach: GateAttach,
    pub dropout: f64,
}

pub struct IntegratedSpec<'a> {
    pub vocab_sizes: &'a [usize],
    pub embed_dim: usize,
    pub embed_init_std: f64,
    pub cin_widths: &'a [usize],
    pub cin_rank: Option<usize>,
    pub deep_widths: &'a [usize],
    pub dropout: f64,
    pub attach: GateAttach,
    pub gate_constants: GateConstants,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
}

impl IntegratedModel {
    pub fn new(store: &mut ParamStore, spec: &IntegratedSpec, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(CoreError::InvalidArg(format!(
                "dropout {} outside [0, 1)",
                spec.dropout
            )));
        }
        let embeddings = FieldEmbeddings::new(
            store,
            "embed",
            spec.vocab_sizes,
            spec.embed_dim,
            spec.embed_init_std,
            rng,
        )?;
        let m = embeddings.num_fields();
        let linear_tables = (0..m)
            .map(|j| {
                store.add(
                    &format!("linear.f{j}"),
                    Tensor::randn(vec![spec.vocab_sizes[j], 1], 0.0, spec.embed_init_std, rng),
                )
            })
            .collect();
        let cin = Cin::new(store, "cin", m, spec.cin_widths, spec.cin_rank, rng)?;
        let deep = Mlp::new(
            store,
            "deep",
            embeddings.interface_dim(),
            spec.deep_widths,
            rng,
        )?;
        let pooled = cin.pooled_dim();
        let head_std = (1.0 / (pooled + deep.out_dim()) as f64).sqrt();
        let w_cin = store.add(
            "head.w_cin",
            Tensor::randn(vec![pooled, 1], 0.0, head_std, rng),
        );
        let w_dnn = store.add(
            "head.w_dnn",
            Tensor::randn(vec![deep.out_dim(), 1], 0.0, head_std, rng),
        );
        let bias = store.add("head.bias", Tensor::zeros(vec![1]));
        let gate = match spec.attach {
            GateAttach::None => None,
            GateAttach::EmbeddingConcat => Some(Gate::new(
                store,
                "gate.embed",
                embeddings.interface_dim(),
                spec.gate_constants,
                spec.alpha_init_mean,
                spec.alpha_init_std,
                rng,
            )?),
            GateAttach::HeadInput => Some(Gate::new(
                store,
                "gate.head",
                pooled + deep.out_dim(),
                spec.gate_constants,
                spec.alpha_init_mean,
                spec.alpha_init_std,
                rng,
            )?),
        };
        Ok(IntegratedModel {
            embeddings,
            linear_tables,
            cin,
            deep,
            w_cin,
            w_dnn,
            bias,
            gate,
            attach: spec.attach,
            dropout: spec.dropout,
        })
    }

    fn gate_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mode: &mut ForwardMode,
    ) -> Result<Option<Var>> {
        let Some(gate) = &self.gate else {
            return Ok(None);
        };
        let z = match mode {
            ForwardMode::Train { tau, gate_rng, .. } => {
                gate.sample_train(tape, store, *tau, gate_rng)?
            }
            ForwardMode::FrozenNoise { tau, noise } => {
                gate.sample_with_noise(tape, store, *tau, noise)?
            }
            ForwardMode::Eval => gate.deterministic_on(tape, store),
        };
        Ok(Some(z))
    }

    /// The pre-gate interface e = [B, m*D].
    pub fn interface(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Var> {
        let x = self.embeddings.embed(tape, store, rows, idx)?;
        self.embeddings.flatten_interface(tape, x)
    }

    /// Interface values without a caller-visible tape, for the perturbation
    /// protocol.
    pub fn interface_values(
        &self,
        store: &ParamStore,
        rows: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.interface(&mut tape, store, rows, idx)?;
        Ok(tape.value(e).clone())
    }

    /// Forward from an interface tensor already on the tape. `rows`/`idx`
    /// still feed the (ungated) linear branch.
    pub fn forward_from_interface(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        rows: &[Vec<usize>],
        idx: &[usize],
        mut mode: ForwardMode,
    ) -> Result<Var> {
        let b = idx.len();
        let m = self.embeddings.num_fields();
        let d = self.embeddings.dim;
        let eshape = tape.value(e).shape().to_vec();
        if eshape != [b, m * d] {
            return Err(CoreError::ShapeMismatch {
                op: "integrated_forward",
                lhs: eshape,
                rhs: vec![b, m * d],
            });
        }
        let e_used = if self.attach == GateAttach::EmbeddingConcat {
            let z = self
                .gate_var(tape, store, &mut mode)?
                .expect("gate exists for this attach");
            self.gate.as_ref().unwrap().apply(tape, e, z)?
        } else {
            e
        };

        // linear branch: per-field scalar lookups summed
        let mut linear: Option<Var> = None;
        for (j, &table) in self.linear_tables.iter().enumerate() {
            let lookup: Vec<usize> = idx.iter().map(|&i| rows[i][j]).collect();
            if let Some(&bad) = lookup
                .iter()
                .find(|&&v| v >= self.embeddings.vocab_sizes[j])
            {
                return Err(CoreError::Data(format!(
                    "field {j}: index {bad} outside vocabulary of {}",
                    self.embeddings.vocab_sizes[j]
                )));
            }
            let t = store.leaf_on(tape, table);
            let g = tape.gather_rows(t, &lookup)?;
            linear = Some(match linear {
                None => g,
                Some(acc) => tape.add(acc, g)?,
            });
        }
        let linear = linear.expect("at least one field");

        // cin branch over [m, B*D] columns
        let bmd = tape.reshape(e_used, vec![b, m, d])?;
        let mbd = tape.swap_axes01(bmd)?;
        let x0 = tape.reshape(mbd, vec![m, b * d])?;
        let p_plus = self.cin.forward_pooled(tape, store, x0, b, d)?;

        // deep branch on the flattened interface
        let dropout = match &mut mode {
            ForwardMode::Train { dropout_rng, .. } if self.dropout > 0.0 => {
                Some((self.dropout, &mut **dropout_rng))
            }
            _ => None,
        };
        let x_dnn = self.deep.forward(tape, store, e_used, dropout)?;

        // joint head; the HeadInput gate sits on p+ || x_dnn
        let mut joint = tape.concat(&[p_plus, x_dnn], 1)?;
        if self.attach == GateAttach::HeadInput {
            let z = self
                .gate_var(tape, store, &mut mode)?
                .expect("gate exists for this attach");
            joint = self.gate.as_ref().unwrap().apply(tape, joint, z)?;
        }
        let wc = store.leaf_on(tape, self.w_cin);
        let wd = store.leaf_on(tape, self.w_dnn);
        let w = tape.concat(&[wc, wd], 0)?;
        let score = tape.matmul(joint, w)?;
        let with_linear = tape.add(score, linear)?;
        let bv = store.leaf_on(tape, self.bias);
        let logit = tape.add(with_linear, bv)?;
        let prob = tape.sigmoid(logit)?;
        tape.reshape(prob, vec![b])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: &[Vec<usize>],
        idx: &[usize],
        mode: ForwardMode,
    ) -> Result<Var> {
        let e = self.interface(tape, store, rows, idx)?;
        self.forward_from_interface(tape, store, e, rows, idx, mode)
    }

    /// Deterministic probabilities on a scratch tape.
    pub fn predict(
        &self,
        store: &ParamStore,
        rows: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, store, rows, idx, ForwardMode::Eval)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Deterministic probabilities from externally supplied (possibly
    /// perturbed) interface values.
    pub fn predict_from_interface(
        &self,
        store: &ParamStore,
        e: &Tensor,
        rows: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let p = self.forward_from_interface(&mut tape, store, ev, rows, idx, ForwardMode::Eval)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn gates(&self) -> Vec<&Gate> {
        self.gate.iter().collect()
    }
}
