// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels the forward
//! pass and the diagnostics need.
//!
//! Every reduction (dot products, sums of squares, mean squares) is
//! accumulated in `f64` and rounded to `f32` only when stored. Shapes must
//! match exactly; there is no broadcasting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-empty, every dimension
    /// is positive and the element count matches.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (product of all leading dims).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the innermost dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.cols())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    fn require_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![rank],
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Matrix product of `a: [m×k]` and `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_rank(2, "matmul")?;
    b.require_rank(2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = f64::from(a_ip);
            let b_row = &b.data[p * n..(p + 1) * n];
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * f64::from(b_pj);
            }
        }
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Euclidean norm of a slice, accumulated in `f64`.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Root-mean-square normalisation of a single vector followed by the
/// per-dimension scale `w`.
pub fn rmsnorm(x: &[f32], w: &[f32], eps: f64) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op: "rmsnorm" });
    }
    if x.len() != w.len() {
        return Err(Error::Shape {
            op: "rmsnorm",
            lhs: vec![x.len()],
            rhs: vec![w.len()],
        });
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("rmsnorm eps {eps} < 0")));
    }
    let ms = x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(x.iter()
        .zip(w)
        .map(|(&v, &s)| (f64::from(v) * inv * f64::from(s)) as f32)
        .collect())
}

/// [`rmsnorm`] applied to every row of a `[rows×d]` tensor.
pub fn rmsnorm_rows(x: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    if x.cols() != w.numel() {
        return Err(Error::Shape {
            op: "rmsnorm_rows",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.iter_rows() {
        data.extend(rmsnorm(row, &w.data, eps)?);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Row-wise softmax over the last dimension. Entries equal to `-inf`
/// receive probability zero.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    if n == 0 || x.numel() == 0 {
        return Err(Error::EmptyInput { op: "softmax_rows" });
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.iter_rows() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| (f64::from(v) - f64::from(max)).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|&e| (e / total) as f32));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// `x · sigmoid(x)` for a scalar, evaluated in `f64`.
pub fn silu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}

/// Elementwise SiLU.
pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| silu_scalar(v)).collect(),
    }
}

/// Indices of the `k` largest absolute values, returned in ascending index
/// order. Ties are resolved in favour of the lower index.
pub fn topk_abs(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::Range {
            what: "top-k count",
            value: k,
            limit: v.len(),
        });
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
