//! Dense row-major f64 tensor. Value semantics, no views; the autodiff tape
//! owns one per node and desk-scale problems never need aliasing.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Dimensions must be positive and multiply to `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArg(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::InvalidArg(format!(
                "tensor shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn randn(shape: Vec<usize>, mean: f64, std: f64, rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal_scaled(mean, std)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar extraction; errors unless numel == 1.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(CoreError::InvalidArg(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// 2-D element access, row-major.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Numpy-style broadcast of two shapes (align trailing dims; a dim of 1
/// stretches). None when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides padded to `rank`, with 0 on broadcast (size-1 or
/// missing) dims so advancing along them stays in place.
pub(crate) fn broadcast_strides(shape: &[usize], rank: usize, out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let offset = rank - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        let full = i + offset;
        strides[full] = if shape[i] == 1 && out_shape[full] != 1 {
            0
        } else {
            s
        };
        s *= shape[i];
    }
    strides
}

/// Elementwise combine with broadcasting; the odometer walk keeps both input
/// offsets in sync with the output index.
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, rank, out_shape);
    let sb = broadcast_strides(b_shape, rank, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut counters = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            counters[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counters[d] < out_shape[d] {
                break;
            }
            counters[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (laid out as `out_shape`) down to `in_shape`, undoing a
/// broadcast. Used by binop backward passes.
pub(crate) fn reduce_grad_to_shape(
    grad: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
) -> Vec<f64> {
    let rank = out_shape.len();
    let strides = broadcast_strides(in_shape, rank, out_shape);
    let n_in: usize = in_shape.iter().product();
    let mut out = vec![0.0; n_in];
    let mut counters = vec![0usize; rank];
    let mut idx = 0usize;
    for g in grad {
        out[idx] += g;
        for d in (0..rank).rev() {
            counters[d] += 1;
            idx += strides[d];
            if counters[d] < out_shape[d] {
                break;
            }
            counters[d] = 0;
            idx -= strides[d] * out_shape[d];
        }
    }
    out
}
