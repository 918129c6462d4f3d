//! Dense row-major 2-D tensors. Everything the model touches — images
//! flattened to patch rows, token sequences, weight matrices, scalars as
//! 1x1 — lives in this one shape-checked container; higher-rank structure
//! (batch of sequences, heads) is encoded by row blocking at the call site.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length must match shape");
        Tensor { rows, cols, data }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(1, 1, vec![v])
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() requires a 1x1 tensor");
        self.data[0]
    }

    /// `self @ rhs` into a fresh tensor.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions must agree");
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        S::gemm(self.rows, self.cols, rhs.cols, S::one(), &self.data, &rhs.data, S::zero(), &mut out.data);
        out
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shapes must match");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Elementwise `self += k * other`.
    pub fn add_scaled(&mut self, other: &Tensor<S>, k: S) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shapes must match");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * *b;
        }
    }

    pub fn scale(&mut self, k: S) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    /// Sum of squares accumulated in f64 regardless of `S`.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| {
            let x = (*v).as_f64();
            x * x
        }).sum()
    }

    /// Round-trip through f64, e.g. to move tensors between scalar types.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|v| T::of_f64((*v).as_f64())).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x3_3x2() {
        let a = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_rejects_mismatched_shapes() {
        let a = Tensor::<f32>::zeros(2, 3);
        let b = Tensor::<f32>::zeros(2, 3);
        let _ = a.matmul(&b);
    }
}
