//! Dense f64 linear algebra and nonlinearity kernels.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · x` for a vector of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked `out = self · x`; callers guarantee the shapes.
    #[inline]
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// Unchecked `out += self · x`.
    #[inline]
    pub fn matvec_add_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `selfᵀ · y` for a vector of length `rows`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Token-major sequence of equally sized vectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceTensor {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SequenceTensor {
    pub fn zeros(len: usize, dim: usize) -> Self {
        SequenceTensor {
            len,
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn from_flat(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Shape("sequence must hold at least one token".into()));
        }
        if data.len() != len * dim {
            return Err(Error::Shape(format!(
                "sequence {len}x{dim} needs {} entries, got {}",
                len * dim,
                data.len()
            )));
        }
        Ok(SequenceTensor { len, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.len();
        if len == 0 {
            return Err(Error::Shape("sequence must hold at least one token".into()));
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(len * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(SequenceTensor { len, dim, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.len)
    }

    /// Apply a row-wise linear map `w` (out × dim) to every position.
    pub fn project(&self, w: &Matrix) -> Result<SequenceTensor> {
        if w.cols() != self.dim {
            return Err(Error::Shape(format!(
                "projection expects dim {}, sequence has {}",
                w.cols(),
                self.dim
            )));
        }
        let mut out = SequenceTensor::zeros(self.len, w.rows());
        for i in 0..self.len {
            w.matvec_into(self.row(i), out.row_mut(i));
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &SequenceTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", x[i]))),
        None => Ok(()),
    }
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu(x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x, "silu input")?;
    Ok(x.iter().map(|&v| silu_scalar(v)).collect())
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x, "relu input")?;
    Ok(x.iter().map(|&v| v.max(0.0)).collect())
}

/// In-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// RMS normalization with a per-channel scale.
pub fn rms_norm(x: &[f64], scale: &[f64], eps: f64) -> Vec<f64> {
    let ms = dot(x, x) / x.len().max(1) as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

/// Causal depthwise convolution.
///
/// `kernel` is `channels × width`; column `k` weighs the input `k` positions
/// back, so `out[i][e] = bias[e] + Σ_k kernel[e][k] · seq[i-k][e]` with
/// positions before 0 read as zero.
pub fn conv1d_causal(
    seq: &SequenceTensor,
    kernel: &Matrix,
    bias: &[f64],
    d_conv: usize,
) -> Result<SequenceTensor> {
    if d_conv == 0 {
        return Err(Error::Config("d_conv must be at least 1".into()));
    }
    if kernel.cols() > d_conv {
        return Err(Error::Config(format!(
            "conv kernel width {} exceeds declared d_conv {d_conv}",
            kernel.cols()
        )));
    }
    let ch = seq.dim();
    if kernel.rows() != ch || bias.len() != ch {
        return Err(Error::Shape(format!(
            "conv over {ch} channels got kernel {}x{} and bias {}",
            kernel.rows(),
            kernel.cols(),
            bias.len()
        )));
    }
    let width = kernel.cols();
    let mut out = SequenceTensor::zeros(seq.len(), ch);
    for i in 0..seq.len() {
        let o = out.row_mut(i);
        o.copy_from_slice(bias);
        for k in 0..width.min(i + 1) {
            let src = seq.row(i - k);
            for e in 0..ch {
                o[e] += kernel.get(e, k) * src[e];
            }
        }
    }
    Ok(out)
}

/// Dense product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = b.cols();
    let mut out = Matrix::zeros(a.rows(), n);
    if n == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(out.data_mut(), n, |r, orow| {
        for (k, &aik) in a.row(r).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), orow);
            }
        }
    });
    Ok(out)
}
