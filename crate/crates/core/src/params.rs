//! Named parameter store. Tapes are rebuilt every step; parameters live here
//! across steps, get copied onto a tape as leaves, and pull gradients back
//! off after backward().

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Adam first/second moment state, same length as value.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub trainable: bool,
    /// Whether weight decay applies. Gate logits opt out.
    pub decay: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_no_decay(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with(name, value, false)
    }

    fn add_with(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        let n = value.numel();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            value,
            trainable: true,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Put a parameter on a tape. The leaf requires grad only while the
    /// parameter is trainable, so frozen gates cost nothing in backward.
    pub fn leaf_on(&self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        let v = tape.leaf(e.value.clone(), e.trainable);
        tape.param_bindings.push((id.0, v));
        v
    }

    /// Pull gradients off a tape into the store, summing over bindings.
    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        for &(idx, var) in &tape.param_bindings {
            if let Some(g) = tape.grad(var) {
                let e = &mut self.entries[idx];
                if g.len() != e.grad.len() {
                    return Err(CoreError::ShapeMismatch {
                        op: "absorb_grads",
                        lhs: vec![e.grad.len()],
                        rhs: vec![g.len()],
                    });
                }
                for (dst, src) in e.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Copy of all parameter tensors, for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) -> Result<()> {
        if snap.len() != self.entries.len() {
            return Err(CoreError::InvalidArg(format!(
                "snapshot has {} tensors, store has {}",
                snap.len(),
                self.entries.len()
            )));
        }
        for (e, t) in self.entries.iter_mut().zip(snap) {
            if t.shape() != e.value.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "restore",
                    lhs: e.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }

    /// Load a named tensor, e.g. from a checkpoint. Unknown names error.
    pub fn load_named(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| {
                CoreError::Data(format!("checkpoint parameter {name:?} not in model"))
            })?;
        if value.shape() != e.value.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "load_named",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value.clone();
        Ok(())
    }
}

/// Whole-store gradient check: max relative error over every trainable
/// coordinate, comparing backward() against central finite differences of
/// the scalar built by `f`. `f` must be deterministic across calls.
pub fn finite_diff_check_store<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    if tape.value(root).numel() != 1 {
        return Err(CoreError::InvalidArg(
            "finite_diff_check_store: closure must return a scalar".into(),
        ));
    }
    tape.backward(root)?;
    store.absorb_grads(&tape)?;
    let analytic: Vec<Vec<f64>> = store.entries.iter().map(|e| e.grad.clone()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tp = Tape::new();
        let r = f(&mut tp, store)?;
        tp.value(r).item()
    };

    let mut max_rel: f64 = 0.0;
    let n_entries = store.entries.len();
    for ei in 0..n_entries {
        if !store.entries[ei].trainable {
            continue;
        }
        for ci in 0..store.entries[ei].value.numel() {
            let orig = store.entries[ei].value.data()[ci];
            store.entries[ei].value.data_mut()[ci] = orig + h;
            let fp = eval(store)?;
            store.entries[ei].value.data_mut()[ci] = orig - h;
            let fm = eval(store)?;
            store.entries[ei].value.data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[ei][ci];
            let rel = (a - fd).abs() / (a.abs() + 1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
