//! Dense f64 kernels: row-major matrices, matmul, masked softmax, RMSNorm
//! and rotary position embeddings.
//!
//! Everything here is pure and allocation-light; the attention, model and
//! autograd modules are built on these functions only.

use crate::error::{shape_err, Error, Result};

/// Epsilon used by every RMS normalization in the crate.
pub const RMS_EPS: f64 = 1e-6;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return shape_err(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                self.cols
            ));
        }
        Ok(Matrix::from_fn(self.rows, len, |r, c| self.get(r, start + c)))
    }

    /// Horizontal concatenation.
    pub fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if parts.iter().any(|p| p.rows != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let cols = parts.iter().map(Matrix::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Vertical concatenation.
    pub fn concat_rows(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, Matrix::cols);
        if parts.iter().any(|p| p.cols != cols) {
            return shape_err("concat_rows: column counts differ");
        }
        let rows = parts.iter().map(Matrix::rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Matrix { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return shape_err(format!(
            "matmul_transposed {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax. `-inf` entries are treated as masked and map to exactly 0.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r)).map_err(|_| Error::FullyMasked { row: r })?;
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Log-softmax of a single vector.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// `gain[i] * v[i] / sqrt(mean(v²) + eps)`
pub fn rms_norm(v: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != gain.len() {
        return shape_err(format!("rms_norm: {} values, {} gains", v.len(), gain.len()));
    }
    let inv = inv_rms(v, eps);
    Ok(v.iter().zip(gain).map(|(x, g)| g * x * inv).collect())
}

#[inline]
pub(crate) fn inv_rms(v: &[f64], eps: f64) -> f64 {
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// RMS-normalize each row of `m`, splitting it into segments of `gain.len()`.
///
/// With `gain.len() == m.cols()` this is plain per-row RMSNorm; with a
/// head-sized gain it normalizes every head of every row independently.
pub fn rms_norm_rows(m: &Matrix, gain: &[f64], eps: f64) -> Result<Matrix> {
    let seg = gain.len();
    if seg == 0 || m.cols % seg != 0 {
        return shape_err(format!(
            "rms_norm_rows: {} columns not a multiple of gain length {seg}",
            m.cols
        ));
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        for chunk in out.row_mut(r).chunks_mut(seg) {
            let inv = inv_rms(chunk, eps);
            for (x, g) in chunk.iter_mut().zip(gain) {
                *x *= inv * g;
            }
        }
    }
    Ok(out)
}

/// Rotary embedding parameters for one layer kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub base_freq: f64,
    /// Positional interpolation factor: positions are divided by it.
    pub scale: f64,
    pub head_dim: usize,
}

impl RopeParams {
    pub const LOCAL_BASE: f64 = 10_000.0;
    pub const GLOBAL_BASE: f64 = 1_000_000.0;

    pub fn new(base_freq: f64, scale: f64, head_dim: usize) -> Result<Self> {
        let p = Self {
            base_freq,
            scale,
            head_dim,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base_freq > 0.0) {
            return Err(Error::Config(format!("rope base_freq {}", self.base_freq)));
        }
        if !(self.scale >= 1.0) {
            return Err(Error::Config(format!("rope scale {} < 1", self.scale)));
        }
        Ok(())
    }

    /// θ_i for pair `i`.
    #[inline]
    pub fn inv_freq(&self, pair: usize) -> f64 {
        self.base_freq
            .powf(-(2.0 * pair as f64) / self.head_dim as f64)
    }
}

/// Rotate one head vector in place. Pairs are interleaved `(2i, 2i + 1)`.
pub fn rope_rotate(v: &mut [f64], pos: usize, p: &RopeParams, inverse: bool) {
    debug_assert_eq!(v.len(), p.head_dim);
    let t = pos as f64 / p.scale;
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..p.head_dim / 2 {
        let (sin, cos) = (sign * t * p.inv_freq(i)).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

/// Apply RoPE to every row of `x`; row `r` sits at `positions[r]`.
///
/// `x.cols()` may be any multiple of `head_dim`; each head segment is rotated
/// independently.
pub fn rope_apply(x: &Matrix, positions: &[usize], p: &RopeParams) -> Result<Matrix> {
    rope_apply_dir(x, positions, p, false)
}

/// Inverse rotation (the transpose of [`rope_apply`]).
pub fn rope_apply_inverse(x: &Matrix, positions: &[usize], p: &RopeParams) -> Result<Matrix> {
    rope_apply_dir(x, positions, p, true)
}

fn rope_apply_dir(x: &Matrix, positions: &[usize], p: &RopeParams, inverse: bool) -> Result<Matrix> {
    p.validate()?;
    if x.cols % p.head_dim != 0 {
        return shape_err(format!(
            "rope: {} columns, head_dim {}",
            x.cols, p.head_dim
        ));
    }
    if positions.len() != x.rows {
        return shape_err(format!(
            "rope: {} rows, {} positions",
            x.rows,
            positions.len()
        ));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        for head in out.row_mut(r).chunks_mut(p.head_dim) {
            rope_rotate(head, pos, p, inverse);
        }
    }
    Ok(out)
}
