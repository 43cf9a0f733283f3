//! Model stacks that expose a classifier-facing representation interface.
//!
//! Shared pieces live here: the deep branch MLP, tape-level losses, and the
//! composite objective that adds the expected-L0 penalty.

pub mod cin;
pub mod embedding;
pub mod graph;
pub mod integrated;
pub mod text;

use crate::error::{CoreError, Result};
use crate::gate::Gate;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fully connected ReLU stack. The last listed width is the output width;
/// every layer is followed by ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub ws: Vec<ParamId>,
    pub bs: Vec<ParamId>,
    pub in_dim: usize,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || in_dim == 0 {
            return Err(CoreError::InvalidArg(format!(
                "mlp widths {widths:?} with input {in_dim} must all be positive"
            )));
        }
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        let mut fan_in = in_dim;
        for (l, &w) in widths.iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            ws.push(store.add(
                &format!("{prefix}.w{l}"),
                Tensor::randn(vec![fan_in, w], 0.0, std, rng),
            ));
            bs.push(store.add(&format!("{prefix}.b{l}"), Tensor::zeros(vec![w])));
            fan_in = w;
        }
        Ok(Mlp {
            ws,
            bs,
            in_dim,
            widths: widths.to_vec(),
        })
    }

    /// Forward over [B, in_dim]. `dropout` masks hidden activations during
    /// training with inverted scaling; pass None for eval.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(CoreError::ShapeMismatch {
                op: "mlp_forward",
                lhs: shape,
                rhs: vec![self.in_dim],
            });
        }
        let mut drop = dropout;
        let mut h = x;
        for l in 0..self.ws.len() {
            let w = store.leaf_on(tape, self.ws[l]);
            let b = store.leaf_on(tape, self.bs[l]);
            let lin = tape.matmul(h, w)?;
            let biased = tape.add(lin, b)?;
            h = tape.relu(biased)?;
            if let Some((p, rng)) = drop.as_mut() {
                if *p > 0.0 {
                    let n = tape.value(h).numel();
                    let scale = 1.0 / (1.0 - *p);
                    let mask = Tensor::new(
                        tape.value(h).shape().to_vec(),
                        (0..n)
                            .map(|_| if rng.bernoulli(*p) { 0.0 } else { scale })
                            .collect(),
                    )?;
                    let m = tape.constant(mask);
                    h = tape.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Mean negative log likelihood of Bernoulli probabilities. Probabilities
/// are clamped away from {0, 1}; sigmoid outputs are interior so the clamp
/// never clips gradients in practice.
pub fn binary_log_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let n = tape.value(probs).numel();
    if tape.value(probs).shape() != [n] || n != labels.len() || n == 0 {
        return Err(CoreError::InvalidArg(format!(
            "log loss: probs shape {:?} vs {} labels",
            tape.value(probs).shape(),
            labels.len()
        )));
    }
    let y = Tensor::from_vec(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let yc = Tensor::from_vec(y.data().iter().map(|v| 1.0 - v).collect());
    let p = tape.clip(probs, 1e-12, 1.0 - 1e-12)?;
    let one_minus = tape.affine(p, -1.0, 1.0)?;
    let lp = tape.log(p)?;
    let l1p = tape.log(one_minus)?;
    let yv = tape.constant(y);
    let ycv = tape.constant(yc);
    let t1 = tape.mul(yv, lp)?;
    let t2 = tape.mul(ycv, l1p)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean_all(s)?;
    tape.affine(m, -1.0, 0.0)
}

/// Mean cross entropy over [n, C] logits. The log-sum-exp shift is a
/// detached constant, which leaves gradients exact.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "cross entropy: logits shape {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(CoreError::InvalidArg(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let row_max = {
        let v = tape.value(logits).data();
        let mut mx = Vec::with_capacity(n);
        for i in 0..n {
            mx.push(
                v[i * c..(i + 1) * c]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
        Tensor::new(vec![n, 1], mx)?
    };
    let mx = tape.constant(row_max);
    let sh = tape.sub(logits, mx)?;
    let ex = tape.exp(sh)?;
    let se = tape.sum_axis(ex, 1)?;
    let lse = tape.log(se)?;
    let lse_col = tape.reshape(lse, vec![n, 1])?;
    let logp = tape.sub(sh, lse_col)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let oh = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = tape.mul(logp, oh)?;
    let per = tape.sum_axis(picked, 1)?;
    let m = tape.mean_all(per)?;
    tape.affine(m, -1.0, 0.0)
}

/// Row softmax on plain values, for prediction extraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(CoreError::InvalidArg(format!(
            "softmax needs 2-D, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// task_loss + lambda * sum of expected gate L0 at temperature tau. Skips
/// the penalty subgraph entirely when lambda is 0 or there are no gates.
pub fn total_objective(
    tape: &mut Tape,
    store: &ParamStore,
    task_loss: Var,
    gates: &[&Gate],
    lambda: f64,
    tau: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CoreError::InvalidArg(format!(
            "penalty weight {lambda} must be >= 0"
        )));
    }
    if lambda == 0.0 || gates.is_empty() {
        return Ok(task_loss);
    }
    let mut pen: Option<Var> = None;
    for g in gates {
        let e = g.expected_l0(tape, store, tau)?;
        pen = Some(match pen {
            None => e,
            Some(p) => tape.add(p, e)?,
        });
    }
    let scaled = tape.affine(pen.unwrap(), lambda, 0.0)?;
    tape.add(task_loss, scaled)
}
