//! Per-field embedding tables for categorical (or bucketized numeric)
//! tabular data. Every field carries its own vocabulary; index 0 is reserved
//! by the dataset layer for the missing token.

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FieldEmbeddings {
    pub tables: Vec<ParamId>,
    pub vocab_sizes: Vec<usize>,
    pub dim: usize,
}

impl FieldEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_sizes: &[usize],
        dim: usize,
        init_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if vocab_sizes.is_empty() || dim == 0 {
            return Err(CoreError::InvalidArg(format!(
                "embeddings need fields and a positive dim, got {} fields dim {dim}",
                vocab_sizes.len()
            )));
        }
        if let Some((j, _)) = vocab_sizes.iter().enumerate().find(|(_, &v)| v == 0) {
            return Err(CoreError::InvalidArg(format!(
                "field {j} has an empty vocabulary"
            )));
        }
        let tables = vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                store.add(
                    &format!("{prefix}.f{j}"),
                    Tensor::randn(vec![v, dim], 0.0, init_std, rng),
                )
            })
            .collect();
        Ok(FieldEmbeddings {
            tables,
            vocab_sizes: vocab_sizes.to_vec(),
            dim,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    /// Embed the rows selected by `idx` into a [B, m, D] block; row j of
    /// each instance is field j's embedding.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: &[Vec<usize>],
        idx: &[usize],
    ) -> Result<Var> {
        let m = self.num_fields();
        if idx.is_empty() {
            return Err(CoreError::InvalidArg("embed: empty batch".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows.len()) {
            return Err(CoreError::InvalidArg(format!(
                "embed: row index {bad} out of range for {} rows",
                rows.len()
            )));
        }
        let mut per_field = Vec::with_capacity(m);
        for j in 0..m {
            let mut lookup = Vec::with_capacity(idx.len());
            for &i in idx {
                let row = &rows[i];
                if row.len() != m {
                    return Err(CoreError::Data(format!(
                        "row {i} has {} fields, expected {m}",
                        row.len()
                    )));
                }
                let v = row[j];
                if v >= self.vocab_sizes[j] {
                    return Err(CoreError::Data(format!(
                        "row {i}, field {j}: index {v} outside vocabulary of {}",
                        self.vocab_sizes[j]
                    )));
                }
                lookup.push(v);
            }
            let table = store.leaf_on(tape, self.tables[j]);
            let g = tape.gather_rows(table, &lookup)?;
            per_field.push(tape.reshape(g, vec![idx.len(), 1, self.dim])?);
        }
        tape.concat(&per_field, 1)
    }

    /// Flatten a [B, m, D] block into the interface vector [B, m*D]; field
    /// blocks stay contiguous per instance.
    pub fn flatten_interface(&self, tape: &mut Tape, x_bmd: Var) -> Result<Var> {
        let shape = tape.value(x_bmd).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.num_fields() || shape[2] != self.dim {
            return Err(CoreError::ShapeMismatch {
                op: "flatten_interface",
                lhs: shape,
                rhs: vec![self.num_fields(), self.dim],
            });
        }
        let b = shape[0];
        tape.reshape(x_bmd, vec![b, self.num_fields() * self.dim])
    }

    pub fn interface_dim(&self) -> usize {
        self.num_fields() * self.dim
    }
}
