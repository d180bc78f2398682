//! Minimal dense f32 kernels shared by every other module.
//!
//! All reductions run left to right in index order so that repeated runs,
//! batch vs. sequential execution, and split vs. whole forward passes are
//! bit-identical.

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn set_row(&mut self, r: usize, values: &[f32]) {
        debug_assert_eq!(values.len(), self.cols);
        self.row_mut(r).copy_from_slice(values);
    }

    /// Stack the given rows of `self` into a new matrix, in the order given.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.set_row(i, self.row(r));
        }
        out
    }

    /// Naive row-major matmul; the k loop runs left to right.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = rhs.row(k);
                for j in 0..rhs.cols {
                    out_row[j] += a * rhs_row[j];
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bytes of f32 payload; used by the activation meter.
    pub fn payload_bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }
}

/// Dot product with left-to-right accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// In-place numerically stable softmax over one row (max subtraction).
pub fn softmax_in_place(row: &mut [f32]) {
    debug_assert!(!row.is_empty());
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax. Each output row sums to 1 within 1e-6 for finite input.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Rotate one vector in place, treating it as one head of width `row.len()`.
///
/// Pair `j` = `(row[2j], row[2j+1])` is rotated by `position * base^(-2j/d)`.
/// `position` is a float so callers can apply the inverse rotation with a
/// negative value.
pub fn rope_rotate_in_place(row: &mut [f32], position: f32, base: f32) {
    debug_assert!(row.len() % 2 == 0, "rotary width must be even");
    let d = row.len() as f32;
    for j in 0..row.len() / 2 {
        let freq = base.powf(-2.0 * j as f32 / d);
        let angle = position * freq;
        let (sin, cos) = angle.sin_cos();
        let x = row[2 * j];
        let y = row[2 * j + 1];
        row[2 * j] = x * cos - y * sin;
        row[2 * j + 1] = x * sin + y * cos;
    }
}

/// Apply rotary position encoding to every row of `vectors`.
///
/// The whole row is treated as a single head. `positions[i]` is the
/// sequence position of row `i`.
pub fn apply_rope(vectors: &Matrix, positions: &[usize], base: f32) -> Result<Matrix> {
    if vectors.cols() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "rotary encoding needs an even width, got {}",
            vectors.cols()
        )));
    }
    if positions.len() != vectors.rows() {
        return Err(Error::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            vectors.rows()
        )));
    }
    let mut out = vectors.clone();
    for (r, &p) in positions.iter().enumerate() {
        rope_rotate_in_place(out.row_mut(r), p as f32, base);
    }
    Ok(out)
}

/// RMS normalization: `gain * x / sqrt(mean(x^2) + epsilon)`.
pub fn rms_normalize(x: &[f32], gain: &[f32], epsilon: f32) -> Vec<f32> {
    debug_assert!(!x.is_empty());
    debug_assert_eq!(x.len(), gain.len());
    let mut sum_sq = 0.0f32;
    for &v in x {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / x.len() as f32 + epsilon).sqrt();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x[i] * inv;
        out.push(if v.is_nan() { 0.0 } else { gain[i] * v });
    }
    out
}
