//! Dense row-major matrices in double precision.
//!
//! The value carrier for everything in the pipeline: features, labels,
//! adjacencies, Laplacians, masks, and trainable parameters. Entries are
//! checked finite at construction; NaN/Inf never enter silently.

use crate::error::{MgmcError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Rejects empty shapes, length mismatches,
    /// and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MgmcError::Dimension(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(MgmcError::Dimension(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(MgmcError::Numeric(format!(
                "non-finite entry {} at flat index {bad}",
                data[bad]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// 1x1 matrix holding a scalar.
    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    /// Convenience constructor from nested rows; panics on ragged input.
    /// Intended for literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        assert!(r > 0, "from_rows needs at least one row");
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in from_rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
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

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a 1x1 matrix.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── Value-level arithmetic (used by AD backward rules and plain math) ──

    /// out = self · other. Errors when inner dimensions disagree.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MgmcError::Dimension(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        // i-k-j loop order: inner loop streams over contiguous rows.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b, "hadamard")
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(MgmcError::Dimension(format!(
                "{name}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// In-place axpy: self += k * other. Shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += k * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(MgmcError::Dimension(format!(
                "trace requires square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok((0..self.rows).map(|i| self.data[i * self.cols + i]).sum())
    }

    /// Horizontal concatenation [self | other].
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(MgmcError::Dimension(format!(
                "concat_cols row mismatch: {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Columns [from, to) as a new matrix.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Matrix> {
        if from >= to || to > self.cols {
            return Err(MgmcError::Dimension(format!(
                "slice_cols [{from}, {to}) out of range for {} columns",
                self.cols
            )));
        }
        let cols = to - from;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[from..to]);
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_bad_length() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0, 2.0]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Matrix::identity(2);
        assert_eq!(id.matmul(&a).unwrap(), a);

        let row = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let col = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let prod = row.matmul(&col).unwrap();
        assert_eq!(prod.scalar_value(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "err was: {err}");
    }

    #[test]
    fn concat_slice_roundtrip_exact() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0]]);
        let cat = a.concat_cols(&b).unwrap();
        assert_eq!(cat.slice_cols(0, 3).unwrap(), a);
        assert_eq!(cat.slice_cols(3, 5).unwrap(), b);
    }

    #[test]
    fn trace_requires_square() {
        assert!(Matrix::zeros(2, 3).trace().is_err());
        assert_eq!(Matrix::identity(3).trace().unwrap(), 3.0);
    }

    #[test]
    fn frobenius_hand_value() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(m.frobenius_sq(), 25.0);
    }
}
