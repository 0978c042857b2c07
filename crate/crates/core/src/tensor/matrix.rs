use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::par;

/// Work (rows * inner * cols) below which products stay on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

/// Dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QfaError::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(QfaError::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(QfaError::domain(format!("{what} contains non-finite values")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(QfaError::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f32, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// `||self - other||_F / max(||other||_F, tiny)`
    pub fn rel_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius();
        Ok(diff / reference.frobenius().max(1e-30))
    }
}

/// Plain matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(QfaError::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, out_row: &mut [f32]| {
        let a_row = a.row(i);
        for (p, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        par::for_each_chunk_mut(&mut out.data, n, kernel);
    } else {
        out.data
            .chunks_mut(n)
            .enumerate()
            .for_each(|(i, r)| kernel(i, r));
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(QfaError::shape(format!(
            "matmul_tn: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, out_row: &mut [f32]| {
        for p in 0..k {
            let api = a.data[p * m + i];
            if api == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        par::for_each_chunk_mut(&mut out.data, n, kernel);
    } else {
        out.data
            .chunks_mut(n)
            .enumerate()
            .for_each(|(i, r)| kernel(i, r));
    }
    Ok(out)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(QfaError::shape(format!(
            "matmul_nt: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if n == 0 {
        return Ok(out);
    }
    let kernel = |i: usize, out_row: &mut [f32]| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        par::for_each_chunk_mut(&mut out.data, n, kernel);
    } else {
        out.data
            .chunks_mut(n)
            .enumerate()
            .for_each(|(i, r)| kernel(i, r));
    }
    Ok(out)
}

/// Sums each contiguous block of `group_size` rows.
///
/// Rows index input features and columns index batch items, so the result
/// holds one pooled feature per quantization group.
pub fn group_sum(x: &Matrix, group_size: usize) -> Result<Matrix> {
    if group_size == 0 || x.rows % group_size != 0 {
        return Err(QfaError::shape(format!(
            "group_sum: {} rows not divisible by group size {group_size}",
            x.rows
        )));
    }
    let groups = x.rows / group_size;
    let n = x.cols;
    let mut out = Matrix::zeros(groups, n);
    for g in 0..groups {
        let out_row = &mut out.data[g * n..(g + 1) * n];
        for i in g * group_size..(g + 1) * group_size {
            for (o, &v) in out_row.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Repeats each row `group_size` times; the adjoint of [`group_sum`].
pub fn group_expand(x: &Matrix, group_size: usize) -> Matrix {
    let n = x.cols;
    let mut out = Matrix::zeros(x.rows * group_size, n);
    for g in 0..x.rows {
        for i in g * group_size..(g + 1) * group_size {
            out.data[i * n..(i + 1) * n].copy_from_slice(x.row(g));
        }
    }
    out
}
