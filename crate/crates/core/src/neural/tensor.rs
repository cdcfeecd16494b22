use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are `1 x n`.
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!("{rows}x{cols} tensor needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {}x{} into {rows}x{cols}", self.rows, self.cols)));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    /// Stacks equal-width rows.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("stack_rows width mismatch"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor { rows, cols, data })
    }
}

/// `out[R,N] = x[R,K] * w[N,K]^T` (+ `out` when `accumulate`).
pub(crate) fn matmul_t(x: &Tensor, w: &Tensor, out: &mut Tensor, accumulate: bool) {
    let (m, k, n) = (x.rows, x.cols, w.rows);
    debug_assert_eq!(w.cols, k);
    debug_assert_eq!((out.rows, out.cols), (m, n));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized by the asserted shapes above; strides describe
    // row-major x, transposed row-major w and row-major out.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.data.as_ptr(),
            k as isize,
            1,
            w.data.as_ptr(),
            1,
            k as isize,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[R,K] += dy[R,N] * w[N,K]`
pub(crate) fn matmul_acc(dy: &Tensor, w: &Tensor, out: &mut Tensor) {
    let (m, n, k) = (dy.rows, dy.cols, w.cols);
    debug_assert_eq!(w.rows, n);
    debug_assert_eq!((out.rows, out.cols), (m, k));
    // SAFETY: see matmul_t.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            dy.data.as_ptr(),
            n as isize,
            1,
            w.data.as_ptr(),
            k as isize,
            1,
            1.0,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out[N,K] += dy[R,N]^T * x[R,K]`
pub(crate) fn matmul_tn_acc(dy: &Tensor, x: &Tensor, out: &mut Tensor) {
    let (r, n, k) = (dy.rows, dy.cols, x.cols);
    debug_assert_eq!(x.rows, r);
    debug_assert_eq!((out.rows, out.cols), (n, k));
    // SAFETY: see matmul_t.
    unsafe {
        matrixmultiply::dgemm(
            n,
            r,
            k,
            1.0,
            dy.data.as_ptr(),
            1,
            n as isize,
            x.data.as_ptr(),
            k as isize,
            1,
            1.0,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, w: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), w.rows());
        for r in 0..x.rows() {
            for n in 0..w.rows() {
                let mut s = 0.0;
                for k in 0..x.cols() {
                    s += x.get(r, k) * w.get(n, k);
                }
                out.set(r, n, s);
            }
        }
        out
    }

    #[test]
    fn matmul_kernels_match_naive() {
        let x = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let w = Tensor::from_vec(2, 4, (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut y = Tensor::zeros(3, 2);
        matmul_t(&x, &w, &mut y, false);
        let expect = naive(&x, &w);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let dy = Tensor::from_vec(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let mut dx = Tensor::zeros(3, 4);
        matmul_acc(&dy, &w, &mut dx);
        let mut dw = Tensor::zeros(2, 4);
        matmul_tn_acc(&dy, &x, &mut dw);
        for r in 0..3 {
            for k in 0..4 {
                let e: f64 = (0..2).map(|n| dy.get(r, n) * w.get(n, k)).sum();
                assert!((dx.get(r, k) - e).abs() < 1e-12);
            }
        }
        for n in 0..2 {
            for k in 0..4 {
                let e: f64 = (0..3).map(|r| dy.get(r, n) * x.get(r, k)).sum();
                assert!((dw.get(n, k) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
