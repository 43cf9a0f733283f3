//! Test-time perturbation protocol.
//!
//! A trained model is scored once per condition on the same test batch. The
//! grid order is fixed (iid, then missingness, noise, quantization,
//! occlusion at three strengths each) and column statistics are frozen from
//! the clean batch, so every condition sees the same reference scale.
//! Perturbation randomness comes from a substream keyed only by (seed,
//! condition label), never from model internals, which keeps the corruption
//! identical across methods being compared.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbKind {
    Iid,
    /// Each cell independently zeroed with probability p.
    Missing {
        p: f64,
    },
    /// Additive N(0, (sigma_frac * column std)^2) noise.
    Gaussian {
        sigma_frac: f64,
    },
    /// Uniform quantization to 2^bits levels over the frozen [min, max].
    Quantize {
        bits: u32,
    },
    /// One contiguous block of ceil(frac * dim) cells zeroed per row.
    Occlude {
        frac: f64,
    },
}

impl PerturbKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbKind::Iid => Ok(()),
            PerturbKind::Missing { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(CoreError::InvalidArg(format!(
                        "missingness p {p} outside [0, 1]"
                    )));
                }
                Ok(())
            }
            PerturbKind::Gaussian { sigma_frac } => {
                if !(sigma_frac >= 0.0) {
                    return Err(CoreError::InvalidArg(format!(
                        "noise fraction {sigma_frac} < 0"
                    )));
                }
                Ok(())
            }
            PerturbKind::Quantize { bits } => {
                if !(1..=16).contains(&bits) {
                    return Err(CoreError::InvalidArg(format!(
                        "quantization bits {bits} outside 1..=16"
                    )));
                }
                Ok(())
            }
            PerturbKind::Occlude { frac } => {
                if !(frac > 0.0 && frac <= 1.0) {
                    return Err(CoreError::InvalidArg(format!(
                        "occlusion fraction {frac} outside (0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Stable label used in reports and as the RNG substream tag.
    pub fn label(&self) -> String {
        match *self {
            PerturbKind::Iid => "iid".to_string(),
            PerturbKind::Missing { p } => format!("missing_{p}"),
            PerturbKind::Gaussian { sigma_frac } => format!("gauss_{sigma_frac}"),
            PerturbKind::Quantize { bits } => format!("quant_{bits}"),
            PerturbKind::Occlude { frac } => format!("occlude_{frac}"),
        }
    }
}

/// The fixed 13-condition evaluation grid.
pub fn protocol_grid() -> Vec<PerturbKind> {
    let mut grid = vec![PerturbKind::Iid];
    for p in [0.1, 0.3, 0.5] {
        grid.push(PerturbKind::Missing { p });
    }
    for s in [0.05, 0.1, 0.2] {
        grid.push(PerturbKind::Gaussian { sigma_frac: s });
    }
    for b in [8, 6, 4] {
        grid.push(PerturbKind::Quantize { bits: b });
    }
    for f in [0.1, 0.2, 0.3] {
        grid.push(PerturbKind::Occlude { frac: f });
    }
    grid
}

/// Per-column statistics of the clean batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureStats {
    pub fn from_batch(batch: &Tensor) -> Result<Self> {
        let shape = batch.shape();
        if shape.len() != 2 {
            return Err(CoreError::InvalidArg(format!(
                "feature stats need a 2-D batch, got shape {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let data = batch.data();
        let mut mean = vec![0.0; d];
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for i in 0..n {
            for j in 0..d {
                let v = data[i * d + j];
                mean[j] += v;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let dlt = data[i * d + j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(FeatureStats {
            mean,
            std,
            min,
            max,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Apply one condition to a [n, d] batch. Iid returns an identical copy.
pub fn apply_perturbation(
    batch: &Tensor,
    kind: PerturbKind,
    stats: &FeatureStats,
    rng: &mut RngStream,
) -> Result<Tensor> {
    kind.validate()?;
    let shape = batch.shape();
    if shape.len() != 2 || shape[1] != stats.dim() {
        return Err(CoreError::ShapeMismatch {
            op: "apply_perturbation",
            lhs: shape.to_vec(),
            rhs: vec![stats.dim()],
        });
    }
    let (n, d) = (shape[0], shape[1]);
    let mut out = batch.clone();
    let data = out.data_mut();
    match kind {
        PerturbKind::Iid => {}
        PerturbKind::Missing { p } => {
            for v in data.iter_mut() {
                if rng.bernoulli(p) {
                    *v = 0.0;
                }
            }
        }
        PerturbKind::Gaussian { sigma_frac } => {
            for i in 0..n {
                for j in 0..d {
                    data[i * d + j] += rng.normal() * sigma_frac * stats.std[j];
                }
            }
        }
        PerturbKind::Quantize { bits } => {
            let levels = ((1u64 << bits) - 1) as f64;
            for i in 0..n {
                for j in 0..d {
                    let (lo, hi) = (stats.min[j], stats.max[j]);
                    if hi <= lo {
                        data[i * d + j] = lo;
                        continue;
                    }
                    let q = ((data[i * d + j] - lo) * levels / (hi - lo))
                        .round()
                        .clamp(0.0, levels);
                    data[i * d + j] = lo + q * (hi - lo) / levels;
                }
            }
        }
        PerturbKind::Occlude { frac } => {
            let blk = ((frac * d as f64).ceil() as usize).clamp(1, d);
            for i in 0..n {
                let start = rng.below(d - blk + 1);
                for j in start..start + blk {
                    data[i * d + j] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Seed-by-condition metric grid plus the aggregates reported everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub conditions: Vec<String>,
    pub seeds: Vec<u64>,
    /// values[s][c] is the metric for seeds[s] under conditions[c].
    pub values: Vec<Vec<f64>>,
}

impl RobustnessMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.conditions.is_empty() {
            return Err(CoreError::InvalidArg("robustness matrix is empty".into()));
        }
        if self.values.len() != self.seeds.len()
            || self
                .values
                .iter()
                .any(|row| row.len() != self.conditions.len())
        {
            return Err(CoreError::InvalidArg(format!(
                "robustness matrix is not {} x {}",
                self.seeds.len(),
                self.conditions.len()
            )));
        }
        Ok(())
    }

    /// Flat mean over every (seed, condition) cell.
    pub fn rob_mu(&self) -> Result<f64> {
        self.validate()?;
        let total: f64 = self.values.iter().flatten().sum();
        Ok(total / (self.seeds.len() * self.conditions.len()) as f64)
    }

    /// Minimum over seeds of the clean-condition metric.
    pub fn worst_iid(&self) -> Result<f64> {
        self.validate()?;
        let iid = self
            .conditions
            .iter()
            .position(|c| c == "iid")
            .ok_or_else(|| CoreError::InvalidArg("matrix has no iid condition".into()))?;
        Ok(self
            .values
            .iter()
            .map(|row| row[iid])
            .fold(f64::INFINITY, f64::min))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(f(i, j));
            }
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn grid_is_thirteen_fixed_conditions() {
        let grid = protocol_grid();
        let labels: Vec<String> = grid.iter().map(|k| k.label()).collect();
        assert_eq!(
            labels,
            vec![
                "iid",
                "missing_0.1",
                "missing_0.3",
                "missing_0.5",
                "gauss_0.05",
                "gauss_0.1",
                "gauss_0.2",
                "quant_8",
                "quant_6",
                "quant_4",
                "occlude_0.1",
                "occlude_0.2",
                "occlude_0.3",
            ]
        );
    }

    #[test]
    fn quantize_hand_values() {
        // 2 bits -> levels {0, 1/3, 2/3, 1} over [0, 1]
        let b = batch(1, 4, |_, j| [0.0, 0.33, 0.66, 1.0][j]);
        let stats = FeatureStats {
            mean: vec![0.0; 4],
            std: vec![0.0; 4],
            min: vec![0.0; 4],
            max: vec![1.0; 4],
        };
        let mut rng = RngStream::new(0);
        let q =
            apply_perturbation(&b, PerturbKind::Quantize { bits: 2 }, &stats, &mut rng).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in q.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn missingness_extremes() {
        let b = batch(5, 3, |i, j| (i * 3 + j) as f64 + 1.0);
        let stats = FeatureStats::from_batch(&b).unwrap();
        let mut rng = RngStream::new(1);
        let same =
            apply_perturbation(&b, PerturbKind::Missing { p: 0.0 }, &stats, &mut rng).unwrap();
        assert_eq!(same.data(), b.data());
        let gone =
            apply_perturbation(&b, PerturbKind::Missing { p: 1.0 }, &stats, &mut rng).unwrap();
        assert!(gone.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_block_shape() {
        let d = 10;
        let b = batch(50, d, |_, _| 1.0);
        let stats = FeatureStats::from_batch(&b).unwrap();
        let mut rng = RngStream::new(3);
        let out =
            apply_perturbation(&b, PerturbKind::Occlude { frac: 0.3 }, &stats, &mut rng).unwrap();
        for i in 0..50 {
            let row = &out.data()[i * d..(i + 1) * d];
            let zeros: Vec<usize> = (0..d).filter(|&j| row[j] == 0.0).collect();
            assert_eq!(zeros.len(), 3, "row {i}: {zeros:?}");
            // contiguity
            assert_eq!(zeros[2] - zeros[0], 2, "row {i}: {zeros:?}");
        }
    }

    #[test]
    fn same_stream_same_noise() {
        let b = batch(20, 6, |i, j| (i + j) as f64 * 0.1);
        let stats = FeatureStats::from_batch(&b).unwrap();
        let root = RngStream::new(9).substream("perturb");
        let kind = PerturbKind::Gaussian { sigma_frac: 0.1 };
        let mut r1 = root.substream(&kind.label());
        let mut r2 = root.substream(&kind.label());
        let a = apply_perturbation(&b, kind, &stats, &mut r1).unwrap();
        let c = apply_perturbation(&b, kind, &stats, &mut r2).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn stats_from_batch() {
        let b = batch(4, 2, |i, j| if j == 0 { i as f64 } else { 2.0 });
        let s = FeatureStats::from_batch(&b).unwrap();
        assert_eq!(s.mean, vec![1.5, 2.0]);
        assert_eq!(s.min, vec![0.0, 2.0]);
        assert_eq!(s.max, vec![3.0, 2.0]);
        assert!((s.std[0] - (1.25f64).sqrt()).abs() < 1e-15);
        assert_eq!(s.std[1], 0.0);
    }

    #[test]
    fn matrix_aggregates() {
        let m = RobustnessMatrix {
            conditions: vec!["iid".into(), "gauss_0.1".into()],
            seeds: vec![0, 1],
            values: vec![vec![0.9, 0.8], vec![0.7, 0.6]],
        };
        assert!((m.rob_mu().unwrap() - 0.75).abs() < 1e-15);
        assert!((m.worst_iid().unwrap() - 0.7).abs() < 1e-15);
        let ragged = RobustnessMatrix {
            conditions: vec!["iid".into()],
            seeds: vec![0, 1],
            values: vec![vec![0.9], vec![0.7, 0.6]],
        };
        assert!(ragged.rob_mu().is_err());
    }

    proptest! {
        #[test]
        fn quantize_idempotent(
            vals in prop::collection::vec(-5.0f64..5.0, 8..64),
            bits in 1u32..10,
        ) {
            let d = 4;
            let n = vals.len() / d;
            let b = Tensor::new(vec![n, d], vals[..n * d].to_vec()).unwrap();
            let stats = FeatureStats::from_batch(&b).unwrap();
            let mut r1 = RngStream::new(0);
            let once = apply_perturbation(&b, PerturbKind::Quantize { bits }, &stats, &mut r1).unwrap();
            let twice = apply_perturbation(&once, PerturbKind::Quantize { bits }, &stats, &mut r1).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }

        #[test]
        fn iid_is_identity(vals in prop::collection::vec(-2.0f64..2.0, 12..48)) {
            let d = 3;
            let n = vals.len() / d;
            let b = Tensor::new(vec![n, d], vals[..n * d].to_vec()).unwrap();
            let stats = FeatureStats::from_batch(&b).unwrap();
            let mut rng = RngStream::new(5);
            let out = apply_perturbation(&b, PerturbKind::Iid, &stats, &mut rng).unwrap();
            prop_assert_eq!(out.data(), b.data());
        }
    }
}
