//! Node classifiers: spectral-style GCN and mean-aggregator GraphSAGE.
//!
//! Both precompute a dense n x n propagation operator from the edge list
//! (fine at desk scale) and share the same head: ReLU hidden layers, an
//! ungated linear classifier, and an optional hard-concrete gate on the
//! final node representation, which is the classifier-facing interface.

use crate::error::{CoreError, Result};
use crate::gate::{Gate, GateConstants};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Gcn,
    Sage,
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Vec<bool>> {
    let mut adj = vec![false; n * n];
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(CoreError::Data(format!(
                "edge ({u}, {v}) references node >= {n}"
            )));
        }
        adj[u * n + v] = true;
        adj[v * n + u] = true;
    }
    Ok(adj)
}

/// Symmetric GCN operator D^-1/2 (A + I) D^-1/2. Self-loops are added once
/// regardless of whether the edge list already contains them.
pub fn gcn_operator(n: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    if n == 0 {
        return Err(CoreError::InvalidArg("graph with zero nodes".into()));
    }
    let mut adj = adjacency(n, edges)?;
    for i in 0..n {
        adj[i * n + i] = true;
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| adj[i * n + j]).count() as f64)
        .collect();
    let mut op = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if adj[i * n + j] {
                op[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Tensor::new(vec![n, n], op)
}

/// Row-normalized neighbor mean (no self-loops). Isolated nodes get a zero
/// row, so their aggregated message is the zero vector.
pub fn mean_operator(n: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    if n == 0 {
        return Err(CoreError::InvalidArg("graph with zero nodes".into()));
    }
    let adj = adjacency(n, edges)?;
    let mut op = vec![0.0; n * n];
    for i in 0..n {
        let deg = (0..n).filter(|&j| adj[i * n + j]).count();
        if deg == 0 {
            continue;
        }
        for j in 0..n {
            if adj[i * n + j] {
                op[i * n + j] = 1.0 / deg as f64;
            }
        }
    }
    Tensor::new(vec![n, n], op)
}

#[derive(Debug, Clone)]
pub struct GraphModel {
    pub kind: GraphKind,
    pub layer_ws: Vec<ParamId>,
    pub hidden: Vec<usize>,
    pub in_dim: usize,
    pub classes: usize,
    pub w_cls: ParamId,
    pub b_cls: ParamId,
    pub gate: Option<Gate>,
}

pub struct GraphSpec<'a> {
    pub kind: GraphKind,
    pub in_dim: usize,
    pub hidden: &'a [usize],
    pub classes: usize,
    pub gated: bool,
    pub gate_constants: GateConstants,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
}

impl GraphModel {
    pub fn new(store: &mut ParamStore, spec: &GraphSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.hidden.is_empty() || spec.hidden.contains(&0) {
            return Err(CoreError::InvalidArg(format!(
                "graph model needs positive hidden widths, got {:?}",
                spec.hidden
            )));
        }
        if spec.classes < 2 || spec.in_dim == 0 {
            return Err(CoreError::InvalidArg(format!(
                "graph model needs in_dim > 0 and >= 2 classes, got {} / {}",
                spec.in_dim, spec.classes
            )));
        }
        let mut ws = Vec::with_capacity(spec.hidden.len());
        let mut fan = spec.in_dim;
        for (l, &h) in spec.hidden.iter().enumerate() {
            // SAGE concatenates self and aggregated neighbor features
            let rows = match spec.kind {
                GraphKind::Gcn => fan,
                GraphKind::Sage => 2 * fan,
            };
            let std = (2.0 / rows as f64).sqrt();
            ws.push(store.add(
                &format!("graph.w{l}"),
                Tensor::randn(vec![rows, h], 0.0, std, rng),
            ));
            fan = h;
        }
        let last = *spec.hidden.last().unwrap();
        let std = (1.0 / last as f64).sqrt();
        let w_cls = store.add(
            "cls.w",
            Tensor::randn(vec![last, spec.classes], 0.0, std, rng),
        );
        let b_cls = store.add("cls.b", Tensor::zeros(vec![spec.classes]));
        let gate = if spec.gated {
            Some(Gate::new(
                store,
                "gate.node",
                last,
                spec.gate_constants,
                spec.alpha_init_mean,
                spec.alpha_init_std,
                rng,
            )?)
        } else {
            None
        };
        Ok(GraphModel {
            kind: spec.kind,
            layer_ws: ws,
            hidden: spec.hidden.to_vec(),
            in_dim: spec.in_dim,
            classes: spec.classes,
            w_cls,
            b_cls,
            gate,
        })
    }

    /// Message passing up to the final node representation [n, last_hidden],
    /// before any gate. `operator` must come from gcn_operator or
    /// mean_operator to match the model kind.
    pub fn node_representation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        operator: &Tensor,
    ) -> Result<Var> {
        let fshape = tape.value(features).shape().to_vec();
        if fshape.len() != 2 || fshape[1] != self.in_dim {
            return Err(CoreError::ShapeMismatch {
                op: "graph_forward",
                lhs: fshape,
                rhs: vec![self.in_dim],
            });
        }
        let n = fshape[0];
        if operator.shape() != [n, n] {
            return Err(CoreError::ShapeMismatch {
                op: "graph_forward",
                lhs: operator.shape().to_vec(),
                rhs: vec![n, n],
            });
        }
        let op = tape.constant(operator.clone());
        let mut h = features;
        for &w_id in &self.layer_ws {
            let w = store.leaf_on(tape, w_id);
            let pre = match self.kind {
                GraphKind::Gcn => {
                    let hw = tape.matmul(h, w)?;
                    tape.matmul(op, hw)?
                }
                GraphKind::Sage => {
                    let agg = tape.matmul(op, h)?;
                    let cat = tape.concat(&[h, agg], 1)?;
                    tape.matmul(cat, w)?
                }
            };
            h = tape.relu(pre)?;
        }
        Ok(h)
    }

    /// Class logits [n, C]. `deterministic_gate` picks the binary mask;
    /// training passes sampled gate values through `gate_z`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        operator: &Tensor,
        gate_z: Option<Var>,
    ) -> Result<Var> {
        let mut h = self.node_representation(tape, store, features, operator)?;
        if let Some(gate) = &self.gate {
            let z = match gate_z {
                Some(z) => z,
                None => gate.deterministic_on(tape, store),
            };
            h = gate.apply(tape, h, z)?;
        }
        let w = store.leaf_on(tape, self.w_cls);
        let b = store.leaf_on(tape, self.b_cls);
        let s = tape.matmul(h, w)?;
        tape.add(s, b)
    }

    /// Deterministic class probabilities [n, C] on a scratch tape.
    pub fn predict(
        &self,
        store: &ParamStore,
        features: &Tensor,
        operator: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let z = self.logits(&mut tape, store, f, operator, None)?;
        crate::backbones::softmax_rows(tape.value(z))
    }

    pub fn gates(&self) -> Vec<&Gate> {
        self.gate.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::cross_entropy;
    use crate::params::finite_diff_check_store;

    #[test]
    fn gcn_operator_two_nodes_one_edge() {
        let op = gcn_operator(2, &[(0, 1)]).unwrap();
        assert_eq!(op.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn gcn_self_loops_not_doubled() {
        let with_loop = gcn_operator(2, &[(0, 1), (0, 0)]).unwrap();
        let without = gcn_operator(2, &[(0, 1)]).unwrap();
        assert_eq!(with_loop.data(), without.data());
    }

    #[test]
    fn mean_operator_isolated_node_row_is_zero() {
        let op = mean_operator(3, &[(0, 1)]).unwrap();
        assert_eq!(&op.data()[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(&op.data()[0..3], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gcn_one_layer_hand_value() {
        // relu(S H W) with W = I, H = I: relu of [[.5,.5],[.5,.5]]
        let mut tape = Tape::new();
        let s = gcn_operator(2, &[(0, 1)]).unwrap();
        let sv = tape.constant(s);
        let h = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let hw = tape.matmul(sv, h).unwrap();
        let out = tape.relu(hw).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn edge_out_of_range_rejected() {
        assert!(gcn_operator(2, &[(0, 5)]).is_err());
        assert!(mean_operator(2, &[(3, 0)]).is_err());
    }

    fn tiny_graph() -> (usize, Vec<(usize, usize)>, Tensor, Vec<usize>) {
        let n = 5;
        let edges = vec![(0, 1), (1, 2), (3, 4)];
        let mut rng = RngStream::new(8);
        let features = Tensor::randn(vec![n, 3], 0.0, 1.0, &mut rng);
        let labels = vec![0usize, 0, 1, 1, 0];
        (n, edges, features, labels)
    }

    #[test]
    fn forward_shapes_both_kinds() {
        let (n, edges, features, _) = tiny_graph();
        for kind in [GraphKind::Gcn, GraphKind::Sage] {
            let mut store = ParamStore::new();
            let mut rng = RngStream::new(3);
            let spec = GraphSpec {
                kind,
                in_dim: 3,
                hidden: &[4, 3],
                classes: 2,
                gated: true,
                gate_constants: GateConstants::default(),
                alpha_init_mean: 2.0,
                alpha_init_std: 0.1,
            };
            let model = GraphModel::new(&mut store, &spec, &mut rng).unwrap();
            let op = match kind {
                GraphKind::Gcn => gcn_operator(n, &edges).unwrap(),
                GraphKind::Sage => mean_operator(n, &edges).unwrap(),
            };
            let probs = model.predict(&store, &features, &op).unwrap();
            assert_eq!(probs.shape(), &[n, 2]);
            for i in 0..n {
                let s: f64 = probs.data()[i * 2..(i + 1) * 2].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sage_isolated_node_sees_zero_message() {
        // one isolated node; its aggregated half must be exactly zero, so
        // its representation depends only on its own features
        let n = 3;
        let edges = vec![(0, 1)];
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let spec = GraphSpec {
            kind: GraphKind::Sage,
            in_dim: 2,
            hidden: &[3],
            classes: 2,
            gated: false,
            gate_constants: GateConstants::default(),
            alpha_init_mean: 2.0,
            alpha_init_std: 0.1,
        };
        let model = GraphModel::new(&mut store, &spec, &mut rng).unwrap();
        let op = mean_operator(n, &edges).unwrap();
        let f1 = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // changing other nodes' features must not move node 2
        let f2 = Tensor::new(vec![3, 2], vec![9.0, 9.0, 9.0, 9.0, 5.0, 6.0]).unwrap();
        let p1 = model.predict(&store, &f1, &op).unwrap();
        let p2 = model.predict(&store, &f2, &op).unwrap();
        assert_eq!(&p1.data()[4..6], &p2.data()[4..6]);
    }

    #[test]
    fn gradient_check_both_kinds() {
        let (n, edges, features, labels) = tiny_graph();
        for kind in [GraphKind::Gcn, GraphKind::Sage] {
            let mut store = ParamStore::new();
            let mut rng = RngStream::new(19);
            let spec = GraphSpec {
                kind,
                in_dim: 3,
                hidden: &[4, 3],
                classes: 2,
                gated: true,
                gate_constants: GateConstants::default(),
                alpha_init_mean: 0.5,
                alpha_init_std: 0.1,
            };
            let model = GraphModel::new(&mut store, &spec, &mut rng).unwrap();
            let op = match kind {
                GraphKind::Gcn => gcn_operator(n, &edges).unwrap(),
                GraphKind::Sage => mean_operator(n, &edges).unwrap(),
            };
            let noise = model.gate.as_ref().unwrap().sample_noise(&mut rng);
            let train_idx = [0usize, 1, 2, 3, 4];
            let rel = finite_diff_check_store(&mut store, 1e-5, |tp, st| {
                let f = tp.constant(features.clone());
                let z = model
                    .gate
                    .as_ref()
                    .unwrap()
                    .sample_with_noise(tp, st, 0.9, &noise)?;
                let logits = model.logits(tp, st, f, &op, Some(z))?;
                let picked = tp.gather_rows(logits, &train_idx)?;
                cross_entropy(tp, picked, &labels)
            })
            .unwrap();
            assert!(rel < 1e-4, "{kind:?}: rel err {rel}");
        }
    }
}
