//! Calibration and discrimination metrics.
//!
//! Binning convention for ECE: M equal-width bins over [0, 1], a sample with
//! confidence c lands in bin ceil(c * M) (bin 1 when c = 0), empty bins
//! contribute nothing. Binary confidence is max(p, 1-p) and the prediction
//! threshold is strict: p > 0.5 predicts positive.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub m: usize,
    pub n: usize,
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

fn bin_index(conf: f64, m: usize) -> usize {
    if conf <= 0.0 {
        return 0;
    }
    let b = (conf * m as f64).ceil() as usize;
    b.min(m) - 1
}

/// Reliability diagram and ECE from per-sample confidence / correctness.
pub fn reliability(conf: &[f64], correct: &[bool], m: usize) -> Result<ReliabilityReport> {
    if m == 0 {
        return Err(CoreError::InvalidArg("ECE needs at least one bin".into()));
    }
    if conf.len() != correct.len() || conf.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "reliability: {} confidences vs {} labels",
            conf.len(),
            correct.len()
        )));
    }
    if let Some(&c) = conf
        .iter()
        .find(|c| !c.is_finite() || **c < 0.0 || **c > 1.0)
    {
        return Err(CoreError::InvalidArg(format!(
            "confidence {c} outside [0, 1]"
        )));
    }
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0f64; m];
    let mut hit_sum = vec![0.0f64; m];
    for (&c, &ok) in conf.iter().zip(correct) {
        let b = bin_index(c, m);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let n = conf.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(m);
    for b in 0..m {
        if count[b] == 0 {
            bins.push(BinStat {
                count: 0,
                mean_conf: 0.0,
                accuracy: 0.0,
            });
            continue;
        }
        let k = count[b] as f64;
        let mc = conf_sum[b] / k;
        let acc = hit_sum[b] / k;
        ece += (k / n) * (acc - mc).abs();
        bins.push(BinStat {
            count: count[b],
            mean_conf: mc,
            accuracy: acc,
        });
    }
    Ok(ReliabilityReport {
        m,
        n: conf.len(),
        bins,
        ece,
    })
}

/// Binary confidence/correctness from probabilities of the positive class.
fn binary_conf_correct(probs: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<bool>)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(&p) = probs
        .iter()
        .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
    {
        return Err(CoreError::InvalidArg(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let conf = probs.iter().map(|&p| p.max(1.0 - p)).collect();
    let correct = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p > 0.5) == y)
        .collect();
    Ok((conf, correct))
}

pub fn reliability_binary(probs: &[f64], labels: &[bool], m: usize) -> Result<ReliabilityReport> {
    let (conf, correct) = binary_conf_correct(probs, labels)?;
    reliability(&conf, &correct, m)
}

pub fn ece_binary(probs: &[f64], labels: &[bool], m: usize) -> Result<f64> {
    Ok(reliability_binary(probs, labels, m)?.ece)
}

/// Multiclass reliability from a [n, C] probability matrix. Confidence is
/// the max probability, prediction the argmax (first index on ties).
pub fn reliability_multiclass(
    probs: &Tensor,
    labels: &[usize],
    m: usize,
) -> Result<ReliabilityReport> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CoreError::InvalidArg(format!(
            "multiclass reliability: probs shape {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let c = shape[1];
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(CoreError::InvalidArg(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = &probs.data()[i * c..(i + 1) * c];
        let (mut best, mut best_v) = (0usize, row[0]);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        conf.push(best_v);
        correct.push(best == y);
    }
    reliability(&conf, &correct, m)
}

/// Rank-based AUC (Mann-Whitney). Ties contribute one half via average
/// ranks. Errors when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::InvalidArg(
            "non-finite score in AUC input".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::InvalidArg(
            "AUC undefined: labels contain a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares the average rank
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy_binary(probs: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > threshold) == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Negative log likelihood with probabilities clamped away from {0, 1}.
pub fn log_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CoreError::InvalidArg(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Differentiable calibration penalty over a [n] vector of positive-class
/// probabilities.
///
/// Confidence is rebuilt on-tape as relu(p - 1/2) + relu(1/2 - p) + 1/2.
/// Samples are soft-assigned to bin centers with a Gaussian-kernel softmax
/// (row max detached for stability; the shift cancels in the ratio so
/// gradients are exact). Summing w_im * (correct_i - conf_i) per bin and
/// taking relu(x) + relu(-x) as |x| reproduces hard ECE in the limit
/// bandwidth -> 0 without ever dividing by a soft bin mass.
pub fn soft_ece_penalty(
    tape: &mut Tape,
    probs: Var,
    labels: &[bool],
    m: usize,
    bandwidth: f64,
) -> Result<Var> {
    if m == 0 {
        return Err(CoreError::InvalidArg(
            "soft ECE needs at least one bin".into(),
        ));
    }
    if bandwidth <= 0.0 {
        return Err(CoreError::InvalidArg(format!(
            "soft ECE bandwidth {bandwidth} must be > 0"
        )));
    }
    let n = tape.value(probs).numel();
    let pshape = tape.value(probs).shape().to_vec();
    if pshape != [n] || n != labels.len() {
        return Err(CoreError::InvalidArg(format!(
            "soft ECE: probs shape {pshape:?} vs {} labels",
            labels.len()
        )));
    }
    // conf = |p - 1/2| + 1/2, written with relu so it lives on the tape
    let shifted = tape.affine(probs, 1.0, -0.5)?;
    let neg_shifted = tape.affine(probs, -1.0, 0.5)?;
    let r1 = tape.relu(shifted)?;
    let r2 = tape.relu(neg_shifted)?;
    let folded = tape.add(r1, r2)?;
    let conf = tape.affine(folded, 1.0, 0.5)?;

    // correctness is a constant: the argmax is not differentiated
    let correct = Tensor::from_vec(
        tape.value(probs)
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| if (p > 0.5) == y { 1.0 } else { 0.0 })
            .collect(),
    );

    // scores s_im = -(conf_i - c_m)^2 / (2 bw^2) against fixed bin centers
    let centers = Tensor::from_vec((1..=m).map(|b| (b as f64 - 0.5) / m as f64).collect());
    let conf_col = tape.reshape(conf, vec![n, 1])?;
    let c = tape.constant(centers);
    let diff = tape.sub(conf_col, c)?;
    let sq = tape.mul(diff, diff)?;
    let scores = tape.affine(sq, -1.0 / (2.0 * bandwidth * bandwidth), 0.0)?;

    // softmax rows with a detached max shift
    let row_max = {
        let v = tape.value(scores);
        let mut mx = Vec::with_capacity(n);
        for i in 0..n {
            let row = &v.data()[i * m..(i + 1) * m];
            mx.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        Tensor::new(vec![n, 1], mx)?
    };
    let mx = tape.constant(row_max);
    let centered = tape.sub(scores, mx)?;
    let ex = tape.exp(centered)?;
    let denom = tape.sum_axis(ex, 1)?;
    let denom_col = tape.reshape(denom, vec![n, 1])?;
    let w = tape.div(ex, denom_col)?;

    // per-bin signed gap, then |.| and normalize by n
    let corr = tape.constant(correct);
    let gap = tape.sub(corr, conf)?;
    let gap_col = tape.reshape(gap, vec![n, 1])?;
    let contrib = tape.mul(w, gap_col)?;
    let per_bin = tape.sum_axis(contrib, 0)?;
    let neg = tape.affine(per_bin, -1.0, 0.0)?;
    let abs_pos = tape.relu(per_bin)?;
    let abs_neg = tape.relu(neg)?;
    let abs = tape.add(abs_pos, abs_neg)?;
    let total = tape.sum_all(abs)?;
    tape.affine(total, 1.0 / n as f64, 0.0)
}

/// Convenience: soft ECE as a plain number.
pub fn soft_ece_value(probs: &[f64], labels: &[bool], m: usize, bandwidth: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(probs.to_vec()));
    let v = soft_ece_penalty(&mut tape, p, labels, m, bandwidth)?;
    tape.value(v).item()
}
