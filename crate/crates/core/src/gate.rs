//! Hard-concrete stochastic gates over a representation interface.
//!
//! Each gate owns one logit per gated dimension. Training samples a clipped,
//! temperature-stretched concrete variable per dimension; inference snaps to
//! the binary mask sigmoid(alpha) > pi. The expected-L0 penalty
//! sum_j sigmoid(alpha_j - tau * ln(-gamma/zeta)) is exactly the probability
//! each training-time gate is nonzero, which is what the Monte Carlo oracle
//! in the tests checks.

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Noise floor keeping log(u) and log(1-u) bounded.
pub const NOISE_EPS: f64 = 1e-6;

/// Stretch and threshold constants. Defaults follow the usual stretched
/// interval (-0.1, 1.1) with threshold 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConstants {
    pub gamma: f64,
    pub zeta: f64,
    pub pi: f64,
}

impl Default for GateConstants {
    fn default() -> Self {
        GateConstants {
            gamma: -0.1,
            zeta: 1.1,
            pi: 0.5,
        }
    }
}

impl GateConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < 0.0) {
            return Err(CoreError::InvalidArg(format!(
                "gate gamma {} must be < 0",
                self.gamma
            )));
        }
        if !(self.zeta > 1.0) {
            return Err(CoreError::InvalidArg(format!(
                "gate zeta {} must be > 1",
                self.zeta
            )));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(CoreError::InvalidArg(format!(
                "gate pi {} must be in (0, 1)",
                self.pi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Gate {
    pub name: String,
    pub alpha: ParamId,
    pub dim: usize,
    pub constants: GateConstants,
}

impl Gate {
    /// Registers the logit vector (weight decay exempt) and returns the gate.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        constants: GateConstants,
        init_mean: f64,
        init_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        constants.validate()?;
        if dim == 0 {
            return Err(CoreError::InvalidArg("gate over zero dimensions".into()));
        }
        let alpha = store.add_no_decay(
            &format!("{name}.alpha"),
            Tensor::randn(vec![dim], init_mean, init_std, rng),
        );
        Ok(Gate {
            name: name.to_string(),
            alpha,
            dim,
            constants,
        })
    }

    /// Uniform noise in (NOISE_EPS, 1 - NOISE_EPS), one draw per dimension.
    pub fn sample_noise(&self, rng: &mut RngStream) -> Tensor {
        let data = (0..self.dim)
            .map(|_| NOISE_EPS + rng.uniform() * (1.0 - 2.0 * NOISE_EPS))
            .collect();
        Tensor::from_vec(data)
    }

    /// Training-time gate values from explicit noise:
    /// z = clip(sigmoid((logit(u) + alpha) / tau) * (zeta - gamma) + gamma, 0, 1).
    /// Differentiable in alpha; split out from sample_train so gradient
    /// checks can pin the noise.
    pub fn sample_with_noise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tau: f64,
        noise: &Tensor,
    ) -> Result<Var> {
        if tau <= 0.0 {
            return Err(CoreError::InvalidArg(format!(
                "gate temperature {tau} must be > 0"
            )));
        }
        if noise.shape() != [self.dim] {
            return Err(CoreError::ShapeMismatch {
                op: "gate_sample",
                lhs: vec![self.dim],
                rhs: noise.shape().to_vec(),
            });
        }
        if noise.data().iter().any(|&u| u <= 0.0 || u >= 1.0) {
            return Err(CoreError::InvalidArg(
                "gate noise must lie strictly in (0, 1)".into(),
            ));
        }
        let logit_u = Tensor::from_vec(
            noise
                .data()
                .iter()
                .map(|&u| u.ln() - (1.0 - u).ln())
                .collect(),
        );
        let gc = &self.constants;
        let l = tape.constant(logit_u);
        let a = store.leaf_on(tape, self.alpha);
        let pre = tape.add(a, l)?;
        let scaled = tape.affine(pre, 1.0 / tau, 0.0)?;
        let s = tape.sigmoid(scaled)?;
        let stretched = tape.affine(s, gc.zeta - gc.gamma, gc.gamma)?;
        tape.clip(stretched, 0.0, 1.0)
    }

    pub fn sample_train(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tau: f64,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let noise = self.sample_noise(rng);
        self.sample_with_noise(tape, store, tau, &noise)
    }

    /// Deterministic inference mask: 1 where sigmoid(alpha) > pi (strict).
    pub fn deterministic_mask(&self, store: &ParamStore) -> Tensor {
        let pi = self.constants.pi;
        let data = store
            .value(self.alpha)
            .data()
            .iter()
            .map(|&a| {
                let s = 1.0 / (1.0 + (-a).exp());
                if s > pi {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_vec(data)
    }

    /// Deterministic mask as a tape constant, for eval-time forward passes.
    pub fn deterministic_on(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let mask = self.deterministic_mask(store);
        tape.constant(mask)
    }

    /// Differentiable expected number of open gates at temperature tau.
    pub fn expected_l0(&self, tape: &mut Tape, store: &ParamStore, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(CoreError::InvalidArg(format!(
                "gate temperature {tau} must be > 0"
            )));
        }
        let shift = -tau * (-self.constants.gamma / self.constants.zeta).ln();
        let a = store.leaf_on(tape, self.alpha);
        let shifted = tape.affine(a, 1.0, shift)?;
        let s = tape.sigmoid(shifted)?;
        tape.sum_all(s)
    }

    /// Same quantity without a tape.
    pub fn expected_l0_value(&self, store: &ParamStore, tau: f64) -> Result<f64> {
        if tau <= 0.0 {
            return Err(CoreError::InvalidArg(format!(
                "gate temperature {tau} must be > 0"
            )));
        }
        let shift = -tau * (-self.constants.gamma / self.constants.zeta).ln();
        Ok(store
            .value(self.alpha)
            .data()
            .iter()
            .map(|&a| 1.0 / (1.0 + (-(a + shift)).exp()))
            .sum())
    }

    /// Fraction of dimensions open under the deterministic mask.
    pub fn active_fraction(&self, store: &ParamStore) -> f64 {
        let mask = self.deterministic_mask(store);
        mask.data().iter().sum::<f64>() / self.dim as f64
    }

    /// Gate a representation whose trailing dimension matches the gate.
    pub fn apply(&self, tape: &mut Tape, rep: Var, z: Var) -> Result<Var> {
        let rshape = tape.value(rep).shape().to_vec();
        if rshape.last() != Some(&self.dim) {
            return Err(CoreError::ShapeMismatch {
                op: "gate_apply",
                lhs: rshape,
                rhs: vec![self.dim],
            });
        }
        tape.mul(rep, z)
    }

    /// Freeze or unfreeze the logits (used by the fixed-mask ablation).
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_trainable(self.alpha, !frozen);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;

    fn gate_with_alpha(alpha: &[f64]) -> (ParamStore, Gate) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0);
        let g = Gate::new(
            &mut store,
            "g",
            alpha.len(),
            GateConstants::default(),
            0.0,
            0.0,
            &mut rng,
        )
        .unwrap();
        store.value_mut(g.alpha).data_mut().copy_from_slice(alpha);
        (store, g)
    }

    #[test]
    fn midpoint_noise_midpoint_logit() {
        // u = 0.5, alpha = 0, tau = 1: z = clip(0.5 * 1.2 - 0.1) = 0.5
        let (store, g) = gate_with_alpha(&[0.0]);
        let mut tape = Tape::new();
        let noise = Tensor::from_vec(vec![0.5]);
        let z = g.sample_with_noise(&mut tape, &store, 1.0, &noise).unwrap();
        assert!((tape.value(z).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expected_l0_hand_value() {
        // alpha = 0, tau = 1, defaults: sigmoid(ln 11) = 11/12
        let (store, g) = gate_with_alpha(&[0.0]);
        let v = g.expected_l0_value(&store, 1.0).unwrap();
        assert!((v - 11.0 / 12.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn deterministic_mask_strict_threshold() {
        // sigmoid(0) == pi exactly, so alpha = 0 is closed
        let (store, g) = gate_with_alpha(&[0.2, -0.2, 0.0]);
        let mask = g.deterministic_mask(&store);
        assert_eq!(mask.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sample_bounds_always_hold() {
        let (store, g) = gate_with_alpha(&[-3.0, -1.0, 0.0, 1.0, 3.0]);
        let mut rng = RngStream::new(17);
        for &tau in &[0.1, 0.5, 1.0, 2.0] {
            for _ in 0..200 {
                let mut tape = Tape::new();
                let z = g.sample_train(&mut tape, &store, tau, &mut rng).unwrap();
                for &v in tape.value(z).data() {
                    assert!((0.0..=1.0).contains(&v), "z = {v} at tau {tau}");
                }
            }
        }
    }

    #[test]
    fn expected_l0_matches_monte_carlo() {
        let alphas = [-2.0, -0.5, 0.0, 0.5, 2.0];
        let (store, g) = gate_with_alpha(&alphas);
        let tau = 0.8;
        let n = 50_000;
        let mut rng = RngStream::new(23);
        let mut open = vec![0usize; alphas.len()];
        for _ in 0..n {
            let mut tape = Tape::new();
            let z = g.sample_train(&mut tape, &store, tau, &mut rng).unwrap();
            for (j, &v) in tape.value(z).data().iter().enumerate() {
                if v > 0.0 {
                    open[j] += 1;
                }
            }
        }
        let shift = -tau * (0.1f64 / 1.1).ln();
        for (j, &a) in alphas.iter().enumerate() {
            let expected = 1.0 / (1.0 + (-(a + shift)).exp());
            let got = open[j] as f64 / n as f64;
            assert!(
                (got - expected).abs() < 0.01,
                "dim {j}: mc {got} vs {expected}"
            );
        }
        // the summed penalty agrees with the per-dim formula
        let total = g.expected_l0_value(&store, tau).unwrap();
        let manual: f64 = alphas
            .iter()
            .map(|&a| 1.0 / (1.0 + (-(a + shift)).exp()))
            .sum();
        assert!((total - manual).abs() < 1e-12);
    }

    #[test]
    fn gradients_flow_through_sample_and_penalty() {
        let constants = GateConstants::default();
        let noise = Tensor::from_vec(vec![0.3, 0.62, 0.45]);
        let alpha0 = Tensor::from_vec(vec![0.4, -0.6, 1.1]);
        let tau = 0.7;
        // treat alpha as the differentiated input; rebuild the gate math
        // directly on the tape against fixed noise
        let rel = finite_diff_check(&alpha0, 1e-5, |tp, a| {
            let lu = tp.constant(Tensor::from_vec(
                noise
                    .data()
                    .iter()
                    .map(|&u| u.ln() - (1.0 - u).ln())
                    .collect(),
            ));
            let pre = tp.add(a, lu)?;
            let sc = tp.affine(pre, 1.0 / tau, 0.0)?;
            let s = tp.sigmoid(sc)?;
            let st = tp.affine(s, constants.zeta - constants.gamma, constants.gamma)?;
            let z = tp.clip(st, 0.0, 1.0)?;
            // squared norm keeps clipped coordinates contributing zero grad
            let sq = tp.mul(z, z)?;
            tp.sum_all(sq)
        })
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn frozen_gate_alpha_untouched_by_backward() {
        let (mut store, g) = gate_with_alpha(&[0.5, -0.5]);
        g.set_frozen(&mut store, true);
        let mut tape = Tape::new();
        let mut rng = RngStream::new(2);
        let z = g.sample_train(&mut tape, &store, 1.0, &mut rng).unwrap();
        let s = tape.sum_all(z).unwrap();
        tape.backward(s).unwrap();
        store.absorb_grads(&tape).unwrap();
        assert_eq!(store.grad(g.alpha), &[0.0, 0.0]);
    }

    #[test]
    fn constants_validated() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0);
        let bad = GateConstants {
            gamma: 0.1,
            zeta: 1.1,
            pi: 0.5,
        };
        assert!(Gate::new(&mut store, "g", 3, bad, 2.0, 0.1, &mut rng).is_err());
        let bad2 = GateConstants {
            gamma: -0.1,
            zeta: 0.9,
            pi: 0.5,
        };
        assert!(Gate::new(&mut store, "g", 3, bad2, 2.0, 0.1, &mut rng).is_err());
    }
}
