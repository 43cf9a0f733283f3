//! Reverse-mode autodiff on an append-only tape.
//!
//! Nodes are indexed by creation order, so parents always precede children
//! and the backward sweep is a single reverse walk, no explicit topo sort.
//! Every op validates shapes up front and checks its output for NaN/inf;
//! training code relies on that to report the first bad op instead of
//! silently propagating poison.

use crate::error::{CoreError, Result};
use crate::tensor::{broadcast_shape, reduce_grad_to_shape, zip_broadcast, Tensor};

/// Handle into a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    /// Only the slope is kept; the intercept has zero gradient.
    Affine {
        x: Var,
        mul: f64,
    },
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    SwapAxes01(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Accumulated across backward() calls until the tape is dropped.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (param store index, leaf) pairs recorded by ParamStore::leaf_on.
    pub(crate) param_bindings: Vec<(usize, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by backward(), if the node required one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, Tensor::scalar(v), false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(&mut self, op_name: &'static str, op: Op, value: Tensor, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(CoreError::NonFinite { op: op_name });
        }
        Ok(self.push(op, value, rg))
    }

    // ---- elementwise binary ----

    fn binop(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: impl Fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| CoreError::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let data = zip_broadcast(
            &out_shape,
            sa,
            self.value(a).data(),
            sb,
            self.value(b).data(),
            f,
        );
        let rg = self.requires(a) || self.requires(b);
        self.checked(name, make(a, b), Tensor::new(out_shape, data)?, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("div", a, b, Op::Div, |x, y| x / y)
    }

    // ---- matmul (2-D only) ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * c..(l + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.checked(
            "matmul",
            Op::Matmul(a, b),
            Tensor::new(vec![r, c], out)?,
            rg,
        )
    }

    // ---- elementwise unary ----

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| {
                // split by sign to avoid exp overflow
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked("sigmoid", Op::Sigmoid(x), Tensor::new(shape, data)?, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked("relu", Op::Relu(x), Tensor::new(shape, data)?, rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.ln()).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked("log", Op::Log(x), Tensor::new(shape, data)?, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.exp()).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked("exp", Op::Exp(x), Tensor::new(shape, data)?, rg)
    }

    /// mul * x + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| mul * v + add).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked(
            "affine",
            Op::Affine { x, mul },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    /// Clamp to [lo, hi]. Gradient is identity on the closed interval and
    /// zero outside it.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(CoreError::InvalidArg(format!("clip bounds [{lo}, {hi}]")));
        }
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = t.shape().to_vec();
        let rg = self.requires(x);
        self.checked(
            "clip",
            Op::Clip { x, lo, hi },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    // ---- reductions ----

    fn axis_split(&self, v: Var, axis: usize, name: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.value(v).shape();
        if axis >= shape.len() {
            return Err(CoreError::InvalidArg(format!(
                "{name}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name: &'static str = if mean { "mean_axis" } else { "sum_axis" };
        let (outer, len, inner) = self.axis_split(x, axis, name)?;
        let shape = self.value(x).shape();
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += xd[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let rg = self.requires(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        self.checked(name, op, Tensor::new(out_shape, out)?, rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.checked("sum_all", Op::SumAll(x), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.checked("mean_all", Op::MeanAll(x), Tensor::scalar(s / n as f64), rg)
    }

    // ---- structural ----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(CoreError::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(CoreError::InvalidArg(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut axis_off = 0usize;
        for &v in xs {
            let t = self.value(v);
            let alen = t.shape()[axis];
            let td = t.data();
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = (o * axis_total + axis_off) * inner;
                out[dst..dst + alen * inner].copy_from_slice(&td[src..src + alen * inner]);
            }
            axis_off += alen;
        }
        let rg = xs.iter().any(|&v| self.requires(v));
        self.checked(
            "concat",
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            Tensor::new(out_shape, out)?,
            rg,
        )
    }

    /// Select rows of a 2-D tensor; duplicate indices are allowed and their
    /// gradients sum (this is the embedding lookup primitive).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::InvalidArg(format!(
                "gather_rows needs a 2-D tensor, got shape {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if idx.is_empty() {
            return Err(CoreError::InvalidArg("gather_rows with empty index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(CoreError::InvalidArg(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires(x);
        self.checked(
            "gather_rows",
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), cols], out)?,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.requires(x);
        self.checked("reshape", Op::Reshape(x), t, rg)
    }

    /// Transpose the first two axes; trailing axes ride along.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(CoreError::InvalidArg(format!(
                "swap_axes01 needs rank >= 2, got shape {shape:?}"
            )));
        }
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * inner;
                let dst = (j * a + i) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.swap(0, 1);
        let rg = self.requires(x);
        self.checked(
            "swap_axes01",
            Op::SwapAxes01(x),
            Tensor::new(out_shape, out)?,
            rg,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate into each
    /// node's persistent buffer, so calling twice doubles leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(CoreError::InvalidArg(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        local.resize_with(root.0 + 1, || None);
        local[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // persistent accumulation
            {
                let node = &mut self.nodes[i];
                let buf = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.value.numel()]);
                for (b, gv) in buf.iter_mut().zip(&g) {
                    *b += gv;
                }
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    fn add_local(&self, local: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut local[v.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(&contrib) {
                    *b += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                self.add_local(local, a, reduce_grad_to_shape(g, &out_shape, sa));
                self.add_local(local, b, reduce_grad_to_shape(g, &out_shape, sb));
            }
            Op::Sub(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                self.add_local(local, a, reduce_grad_to_shape(g, &out_shape, sa));
                let mut db = reduce_grad_to_shape(g, &out_shape, sb);
                for v in &mut db {
                    *v = -*v;
                }
                self.add_local(local, b, db);
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let ga = zip_broadcast(
                    &out_shape,
                    &out_shape,
                    g,
                    tb.shape(),
                    tb.data(),
                    |gv, bv| gv * bv,
                );
                let gb = zip_broadcast(
                    &out_shape,
                    &out_shape,
                    g,
                    ta.shape(),
                    ta.data(),
                    |gv, av| gv * av,
                );
                self.add_local(local, a, reduce_grad_to_shape(&ga, &out_shape, ta.shape()));
                self.add_local(local, b, reduce_grad_to_shape(&gb, &out_shape, tb.shape()));
            }
            Op::Div(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let ga = zip_broadcast(
                    &out_shape,
                    &out_shape,
                    g,
                    tb.shape(),
                    tb.data(),
                    |gv, bv| gv / bv,
                );
                // d/db (a/b) = -a / b^2
                let coef = zip_broadcast(
                    &out_shape,
                    ta.shape(),
                    ta.data(),
                    tb.shape(),
                    tb.data(),
                    |av, bv| -av / (bv * bv),
                );
                let gb: Vec<f64> = g.iter().zip(&coef).map(|(gv, cv)| gv * cv).collect();
                self.add_local(local, a, reduce_grad_to_shape(&ga, &out_shape, ta.shape()));
                self.add_local(local, b, reduce_grad_to_shape(&gb, &out_shape, tb.shape()));
            }
            Op::Matmul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (r, k) = (ta.shape()[0], ta.shape()[1]);
                let c = tb.shape()[1];
                let ad = ta.data();
                let bd = tb.data();
                let mut da = vec![0.0; r * k];
                let mut db = vec![0.0; k * c];
                for i2 in 0..r {
                    for j in 0..c {
                        let gv = g[i2 * c + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i2 * k + l] += gv * bd[l * c + j];
                            db[l * c + j] += gv * ad[i2 * k + l];
                        }
                    }
                }
                self.add_local(local, a, da);
                self.add_local(local, b, db);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.add_local(local, x, dx);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_local(local, x, dx);
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = g.iter().zip(xv).map(|(gv, &v)| gv / v).collect();
                self.add_local(local, x, dx);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                self.add_local(local, x, dx);
            }
            Op::Affine { x, mul } => {
                let dx = g.iter().map(|gv| gv * mul).collect();
                self.add_local(local, x, dx);
            }
            Op::Clip { x, lo, hi } => {
                let xv = self.nodes[x.0].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| if v >= lo && v <= hi { *gv } else { 0.0 })
                    .collect();
                self.add_local(local, x, dx);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        let gbase = o * inner;
                        for i2 in 0..inner {
                            dx[base + i2] = g[gbase + i2] * scale;
                        }
                    }
                }
                self.add_local(local, x, dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                self.add_local(local, x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                self.add_local(local, x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { xs, axis } => {
                let axis_total = out_shape[axis];
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut axis_off = 0usize;
                for v in xs {
                    let s = self.nodes[v.0].value.shape();
                    let alen = s[axis];
                    let mut dv = vec![0.0; self.nodes[v.0].value.numel()];
                    for o in 0..outer {
                        let dst = o * alen * inner;
                        let src = (o * axis_total + axis_off) * inner;
                        dv[dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                    }
                    axis_off += alen;
                    self.add_local(local, v, dv);
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.nodes[x.0].value.shape();
                let cols = shape[1];
                let mut dx = vec![0.0; shape[0] * cols];
                for (r2, &row) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[row * cols + j] += g[r2 * cols + j];
                    }
                }
                self.add_local(local, x, dx);
            }
            Op::Reshape(x) => {
                self.add_local(local, x, g.to_vec());
            }
            Op::SwapAxes01(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (a, b) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for i2 in 0..a {
                    for j in 0..b {
                        let dst = (i2 * b + j) * inner;
                        let src = (j * a + i2) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                self.add_local(local, x, dx);
            }
        }
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference, |analytic - fd| / (|analytic| + 1e-12) per
/// coordinate. `f` must build a scalar and be deterministic (pre-sample any
/// noise outside the closure).
pub fn finite_diff_check<F>(x: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(CoreError::InvalidArg(format!("finite difference step {h}")));
    }
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone(), true);
    let root = f(&mut tape, vx)?;
    if tape.value(root).numel() != 1 {
        return Err(CoreError::InvalidArg(
            "finite_diff_check: closure must return a scalar".into(),
        ));
    }
    tape.backward(root)?;
    let analytic = tape
        .grad(vx)
        .ok_or_else(|| CoreError::InvalidArg("closure does not depend on input".into()))?
        .to_vec();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tp = Tape::new();
        let v = tp.leaf(t.clone(), false);
        let r = f(&mut tp, v)?;
        tp.value(r).item()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fm = eval(&xm)?;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_broadcast_forward() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tp.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tp.add(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn matmul_forward_and_shape_error() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tp.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let bad = tp.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(matches!(
            tp.matmul(a, bad),
            Err(CoreError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn backward_simple_product() {
        // d/dx sum(x * x) = 2x
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let y = tp.mul(x, x).unwrap();
        let s = tp.sum_all(y).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tp.sum_all(x).unwrap();
        tp.backward(s).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tp.backward(x).is_err());
    }

    #[test]
    fn log_of_nonpositive_is_nonfinite_error() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1], &[-1.0]));
        assert!(matches!(tp.log(x), Err(CoreError::NonFinite { op: "log" })));
    }

    #[test]
    fn exp_overflow_is_caught() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1], &[1000.0]));
        assert!(matches!(tp.exp(x), Err(CoreError::NonFinite { op: "exp" })));
    }

    #[test]
    fn clip_gradient_closed_interval() {
        // values at the boundary keep gradient 1, outside get 0
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[4], &[-0.5, 0.0, 1.0, 1.5]), true);
        let c = tp.clip(x, 0.0, 1.0).unwrap();
        let s = tp.sum_all(c).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_forward_backward() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let g = tp.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tp.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tp.sum_all(g).unwrap();
        tp.backward(s).unwrap();
        // row 2 selected twice accumulates
        assert_eq!(tp.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2, 2], &[0.0; 4]));
        assert!(tp.gather_rows(x, &[2]).is_err());
    }

    #[test]
    fn swap_axes_roundtrip() {
        let mut tp = Tape::new();
        let x = tp.constant(t(
            &[2, 3, 2],
            &(0..12).map(|v| v as f64).collect::<Vec<_>>(),
        ));
        let y = tp.swap_axes01(x).unwrap();
        assert_eq!(tp.value(y).shape(), &[3, 2, 2]);
        let z = tp.swap_axes01(y).unwrap();
        assert_eq!(tp.value(z).data(), tp.value(x).data());
    }

    #[test]
    fn concat_axis1_forward_backward() {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let b = tp.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let c = tp.concat(&[a, b], 1).unwrap();
        assert_eq!(tp.value(c).shape(), &[2, 3]);
        assert_eq!(tp.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tp.constant(t(&[3, 1], &[1.0, 10.0, 100.0]));
        let m = tp.matmul(c, w).unwrap();
        let s = tp.sum_all(m).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tp.grad(b).unwrap(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn finite_diff_each_op() {
        // one composite per op family, all routed through a scalar
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.05, -1.4, 0.9]);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            (
                "sigmoid",
                Box::new(|tp: &mut Tape, v| {
                    let s = tp.sigmoid(v)?;
                    tp.mean_all(s)
                }),
            ),
            (
                "relu_shifted",
                Box::new(|tp: &mut Tape, v| {
                    // shift off zero so fd does not straddle the kink
                    let a = tp.affine(v, 1.0, 0.01)?;
                    let r = tp.relu(a)?;
                    tp.sum_all(r)
                }),
            ),
            (
                "exp_mul",
                Box::new(|tp: &mut Tape, v| {
                    let e = tp.exp(v)?;
                    let m = tp.mul(e, v)?;
                    tp.mean_all(m)
                }),
            ),
            (
                "log_sq",
                Box::new(|tp: &mut Tape, v| {
                    let sq = tp.mul(v, v)?;
                    let sh = tp.affine(sq, 1.0, 0.5)?;
                    let l = tp.log(sh)?;
                    tp.sum_all(l)
                }),
            ),
            (
                "div",
                Box::new(|tp: &mut Tape, v| {
                    let d = tp.exp(v)?;
                    let q = tp.div(v, d)?;
                    tp.mean_all(q)
                }),
            ),
            (
                "matmul_chain",
                Box::new(|tp: &mut Tape, v| {
                    let w = tp.constant(t(&[3, 2], &[0.2, -0.1, 0.4, 0.3, -0.5, 0.6]));
                    let m = tp.matmul(v, w)?;
                    let s = tp.sigmoid(m)?;
                    tp.mean_all(s)
                }),
            ),
            (
                "axis_reductions",
                Box::new(|tp: &mut Tape, v| {
                    let a = tp.sum_axis(v, 0)?;
                    let b = tp.mean_axis(v, 0)?;
                    let c = tp.mul(a, b)?;
                    tp.sum_all(c)
                }),
            ),
            (
                "swap_reshape_concat",
                Box::new(|tp: &mut Tape, v| {
                    let s = tp.swap_axes01(v)?;
                    let r = tp.reshape(s, vec![2, 3])?;
                    let c = tp.concat(&[r, v], 1)?;
                    let sg = tp.sigmoid(c)?;
                    tp.mean_all(sg)
                }),
            ),
            (
                "broadcast_mul",
                Box::new(|tp: &mut Tape, v| {
                    let row = tp.constant(t(&[3], &[0.5, -1.5, 2.0]));
                    let m = tp.mul(v, row)?;
                    let sub = tp.sub(m, v)?;
                    tp.mean_all(sub)
                }),
            ),
        ];
        for (name, f) in cases {
            let rel = finite_diff_check(&x, 1e-5, f.as_ref()).unwrap();
            assert!(rel < 1e-6, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn finite_diff_gather() {
        let x = t(&[4, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let rel = finite_diff_check(&x, 1e-5, |tp, v| {
            let g = tp.gather_rows(v, &[1, 3, 1])?;
            let s = tp.sigmoid(g)?;
            tp.mean_all(s)
        })
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }
}
