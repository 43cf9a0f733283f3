//! Compressed interaction network.
//!
//! Depth-k feature maps take outer Hadamard products against the depth-0
//! field embeddings: X^k_h = sum_ij W^{k,h}_ij (X^{k-1}_i o X^0_j), applied
//! column-wise over the embedding axis, then sum-pooled over that axis and
//! concatenated across depths. Parameter count per layer is
//! H_k * H_{k-1} * m, independent of the embedding dimension. Layer weights
//! are stored flat as [H_k * H_{k-1}, m] with row h * H_{k-1} + i holding
//! W^{k,h}_{i, .}, which turns the double sum into one matmul plus a
//! broadcast multiply.

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum CinLayer {
    Dense {
        w: ParamId,
    },
    /// Per output channel h: W^{k,h} = U_h V_h^T with U_h [H_{k-1}, r],
    /// V_h [m, r].
    LowRank {
        u: Vec<ParamId>,
        v: Vec<ParamId>,
        rank: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Cin {
    pub m: usize,
    pub widths: Vec<usize>,
    pub layers: Vec<CinLayer>,
}

impl Cin {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        widths: &[usize],
        rank: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if m == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(CoreError::InvalidArg(format!(
                "cin needs m > 0 and positive widths, got m {m}, widths {widths:?}"
            )));
        }
        if rank == Some(0) {
            return Err(CoreError::InvalidArg(
                "cin low-rank factor needs rank >= 1".into(),
            ));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut h_prev = m;
        for (k, &h_k) in widths.iter().enumerate() {
            let std = (1.0 / (h_prev as f64 * m as f64)).sqrt();
            let layer = match rank {
                None => CinLayer::Dense {
                    w: store.add(
                        &format!("{prefix}.w{k}"),
                        Tensor::randn(vec![h_k * h_prev, m], 0.0, std, rng),
                    ),
                },
                Some(r) => {
                    let fstd = std.sqrt();
                    let mut u = Vec::with_capacity(h_k);
                    let mut v = Vec::with_capacity(h_k);
                    for h in 0..h_k {
                        u.push(store.add(
                            &format!("{prefix}.u{k}_{h}"),
                            Tensor::randn(vec![h_prev, r], 0.0, fstd, rng),
                        ));
                        v.push(store.add(
                            &format!("{prefix}.v{k}_{h}"),
                            Tensor::randn(vec![m, r], 0.0, fstd, rng),
                        ));
                    }
                    CinLayer::LowRank { u, v, rank: r }
                }
            };
            layers.push(layer);
            h_prev = h_k;
        }
        Ok(Cin {
            m,
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Width of the concatenated pooled vector p+.
    pub fn pooled_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Trainable scalars, the quantity the D-independence audit checks.
    pub fn param_count(&self) -> usize {
        let mut h_prev = self.m;
        let mut total = 0;
        for (k, &h_k) in self.widths.iter().enumerate() {
            total += match &self.layers[k] {
                CinLayer::Dense { .. } => h_k * h_prev * self.m,
                CinLayer::LowRank { rank, .. } => h_k * rank * (h_prev + self.m),
            };
            h_prev = h_k;
        }
        total
    }

    /// Materialize layer k's flat weight [H_k * H_{k-1}, m] on the tape.
    /// Low-rank layers build it from the factors so gradients reach U and V.
    pub fn weight_var(&self, tape: &mut Tape, store: &ParamStore, k: usize) -> Result<Var> {
        match &self.layers[k] {
            CinLayer::Dense { w } => Ok(store.leaf_on(tape, *w)),
            CinLayer::LowRank { u, v, .. } => {
                let mut blocks = Vec::with_capacity(u.len());
                for h in 0..u.len() {
                    let uh = store.leaf_on(tape, u[h]);
                    let vh = store.leaf_on(tape, v[h]);
                    let vt = tape.swap_axes01(vh)?;
                    blocks.push(tape.matmul(uh, vt)?);
                }
                tape.concat(&blocks, 0)
            }
        }
    }

    /// All depth maps over x0 laid out as [m, B*D] (batch instances side by
    /// side along columns). Returns one [H_k, B*D] map per depth.
    pub fn forward_maps(&self, tape: &mut Tape, store: &ParamStore, x0: Var) -> Result<Vec<Var>> {
        let shape = tape.value(x0).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.m {
            return Err(CoreError::ShapeMismatch {
                op: "cin_forward",
                lhs: shape,
                rhs: vec![self.m],
            });
        }
        let bd = shape[1];
        let mut maps = Vec::with_capacity(self.depth());
        let mut x_prev = x0;
        let mut h_prev = self.m;
        for k in 0..self.depth() {
            let h_k = self.widths[k];
            let w = self.weight_var(tape, store, k)?;
            let mixed = tape.matmul(w, x0)?;
            let mixed3 = tape.reshape(mixed, vec![h_k, h_prev, bd])?;
            let prod = tape.mul(mixed3, x_prev)?;
            let x_k = tape.sum_axis(prod, 1)?;
            maps.push(x_k);
            x_prev = x_k;
            h_prev = h_k;
        }
        Ok(maps)
    }

    /// Full batched pass: maps, per-depth pooled vectors [H_k, B], and the
    /// depth-concatenated p+ [B, sum H_k].
    pub fn forward_pooled(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x0: Var,
        batch: usize,
        d: usize,
    ) -> Result<Var> {
        let bd = tape.value(x0).shape()[1];
        if batch * d != bd {
            return Err(CoreError::ShapeMismatch {
                op: "cin_pool",
                lhs: vec![bd],
                rhs: vec![batch, d],
            });
        }
        let maps = self.forward_maps(tape, store, x0)?;
        let mut pooled = Vec::with_capacity(maps.len());
        for (k, &map) in maps.iter().enumerate() {
            let h_k = self.widths[k];
            let m3 = tape.reshape(map, vec![h_k, batch, d])?;
            pooled.push(tape.sum_axis(m3, 2)?);
        }
        let stacked = tape.concat(&pooled, 0)?;
        tape.swap_axes01(stacked)
    }
}

/// Sum-pool a feature map over its trailing embedding axis.
pub fn cin_pool(tape: &mut Tape, map: Var) -> Result<Var> {
    let rank = tape.value(map).shape().len();
    if rank < 2 {
        return Err(CoreError::InvalidArg(format!(
            "cin_pool needs rank >= 2, got shape {:?}",
            tape.value(map).shape()
        )));
    }
    tape.sum_axis(map, rank - 1)
}

/// The printed CIN-only head: probability sigmoid(-(p+ . w_o)). The score
/// enters negated; w_o simply learns the flipped direction, and tests treat
/// the sign as part of the contract.
pub fn cin_only_predict(tape: &mut Tape, p_plus: Var, w_o: Var) -> Result<Var> {
    let ps = tape.value(p_plus).shape().to_vec();
    let ws = tape.value(w_o).shape().to_vec();
    if ps.len() != 2 || ws != [ps[1], 1] {
        return Err(CoreError::ShapeMismatch {
            op: "cin_only_predict",
            lhs: ps,
            rhs: ws,
        });
    }
    let b = ps[0];
    let score = tape.matmul(p_plus, w_o)?;
    let neg = tape.affine(score, -1.0, 0.0)?;
    let s = tape.sigmoid(neg)?;
    tape.reshape(s, vec![b])
}

/// Reference implementation by explicit polynomial expansion. Enumerates
/// every interaction chain (i_1..i_k, j_1..j_k), multiplying scalar
/// coefficients down the chain and Hadamard-multiplying the chosen depth-0
/// rows; completely independent of the matmul path above. Exponential in
/// depth, so inputs are capped at m <= 4, D <= 3, depth <= 3.
///
/// `weights[k]` must be [H_k, H_{k-1}, m]; returns one [H_k, D] map per
/// depth.
pub fn cin_polynomial_oracle(x0: &Tensor, weights: &[Tensor]) -> Result<Vec<Tensor>> {
    let shape = x0.shape();
    if shape.len() != 2 {
        return Err(CoreError::InvalidArg(format!(
            "oracle x0 must be 2-D, got {shape:?}"
        )));
    }
    let (m, d) = (shape[0], shape[1]);
    if m > 4 || d > 3 || weights.len() > 3 || weights.is_empty() {
        return Err(CoreError::InvalidArg(
            "oracle guard: m <= 4, D <= 3, depth in 1..=3".into(),
        ));
    }
    let mut h_prev = m;
    let mut widths = Vec::with_capacity(weights.len());
    for w in weights {
        let ws = w.shape();
        if ws.len() != 3 || ws[1] != h_prev || ws[2] != m {
            return Err(CoreError::ShapeMismatch {
                op: "cin_polynomial_oracle",
                lhs: ws.to_vec(),
                rhs: vec![h_prev, m],
            });
        }
        widths.push(ws[0]);
        h_prev = ws[0];
    }

    // walk chains from depth t down to 1; acc carries the Hadamard product
    // of the depth-0 rows chosen so far
    fn rec(
        weights: &[Tensor],
        widths: &[usize],
        m: usize,
        d: usize,
        x0: &Tensor,
        t: usize,
        row_idx: usize,
        coeff: f64,
        acc: &[f64],
        out: &mut [f64],
    ) {
        let w = &weights[t - 1];
        let h_prev = w.shape()[1];
        let row = |j: usize| -> &[f64] { &x0.data()[j * d..(j + 1) * d] };
        for i in 0..h_prev {
            for j in 0..m {
                let c = coeff * w.data()[(row_idx * h_prev + i) * m + j];
                if c == 0.0 {
                    continue;
                }
                let mut nxt = acc.to_vec();
                for (a, b) in nxt.iter_mut().zip(row(j)) {
                    *a *= b;
                }
                if t == 1 {
                    // i indexes a depth-0 row here: close the chain
                    for (o, (a, b)) in out.iter_mut().zip(nxt.iter().zip(row(i))) {
                        *o += c * a * b;
                    }
                } else {
                    rec(weights, widths, m, d, x0, t - 1, i, c, &nxt, out);
                }
            }
        }
    }

    let mut result = Vec::with_capacity(weights.len());
    for (t, &h_t) in widths.iter().enumerate() {
        let mut map = vec![0.0; h_t * d];
        for h in 0..h_t {
            let ones = vec![1.0; d];
            rec(
                weights,
                &widths,
                m,
                d,
                x0,
                t + 1,
                h,
                1.0,
                &ones,
                &mut map[h * d..(h + 1) * d],
            );
        }
        result.push(Tensor::new(vec![h_t, d], map)?);
    }
    Ok(result)
}
