//! Dense row-major f64 matrices.
//!
//! Everything gradient-related runs in 64-bit floats; feature banks on disk
//! are 32-bit and get widened on load. Shapes are `(rows, cols)`; a scalar
//! is a 1x1 tensor.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![1.0; rows * cols] }
    }

    /// 1x1 tensor holding `v`.
    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Builds a tensor from row-major data. Panics if the length does not
    /// match the shape; that is a programming error, not an input error.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { rows: rows.len(), cols, data }
    }

    pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{what} contains non-finite values")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self (r x k) * other (k x c)`, cache-friendly i-k-j order.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dim mismatch");
        let (r, k, c) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let arow = self.row(i);
            let orow = &mut out.data[i * c..(i + 1) * c];
            for (kk, &aik) in arow.iter().enumerate().take(k) {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * c..(kk + 1) * c];
                for j in 0..c {
                    orow[j] += aik * brow[j];
                }
            }
        }
        out
    }

    /// `self (r x k) * other^T (c x k)` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim mismatch");
        let (r, c) = (self.rows, other.rows);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let arow = self.row(i);
            for j in 0..c {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow.iter()) {
                    acc += a * b;
                }
                out.data[i * c + j] = acc;
            }
        }
        out
    }

    /// `self^T (k x r becomes r x k) * other (k x c)`: `self` is k x r,
    /// result is r x c. Accumulates rank-1 updates so inner loops stay
    /// contiguous.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dim mismatch");
        let (k, r, c) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(r, c);
        for kk in 0..k {
            let arow = self.row(kk);
            let brow = &other.data[kk * c..(kk + 1) * c];
            for i in 0..r {
                let aki = arow[i];
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += aki * brow[j];
                }
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Widens a f32 feature slice into an f64 tensor.
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        assert_eq!(rows * cols, data.len());
        Tensor {
            rows,
            cols,
            data: data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Narrows to f32 (storage precision for features and checkpoints).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(eye.matmul(&a), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.25 - 1.0).collect());
        let plain = a.matmul(&b);
        assert_eq!(a.matmul_nt(&b.transpose()), plain);
        assert_eq!(a.transpose().matmul_tn(&b), plain);
    }

    #[test]
    fn f32_round_trip_is_exact_after_first_narrowing() {
        let t = Tensor::from_vec(1, 3, vec![0.1, -2.5, 1e-7]);
        let narrow = t.to_f32();
        let widened = Tensor::from_f32(1, 3, &narrow);
        assert_eq!(widened.to_f32(), narrow);
    }
}
