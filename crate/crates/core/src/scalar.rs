//! Floating-point abstraction for the numeric core.
//!
//! Model, objective, and optimizer math is written once against [`Scalar`]
//! and instantiated at `f32` (training throughput) and `f64` (gradient
//! checking, where finite differences need ~1e-11 headroom). The only
//! per-type code is the GEMM hook, which dispatches to the matching
//! `matrixmultiply` kernel.

use std::fmt::{Debug, Display};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a @ b + beta * c` for row-major matrices,
    /// `a: m x k`, `b: k x n`, `c: m x n`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Conversion from `f64` (rounds at `f32`). Named to avoid clashing
    /// with `FromPrimitive::from_f64`.
    fn of_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    /// Widen to `f64` for accumulation and reporting (avoids `ToPrimitive::to_f64`).
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar widens to f64")
    }
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        assert_eq!(a.len(), m * k, "lhs length");
        assert_eq!(b.len(), k * n, "rhs length");
        assert_eq!(c.len(), m * n, "out length");
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        assert_eq!(a.len(), m * k, "lhs length");
        assert_eq!(b.len(), k * n, "rhs length");
        assert_eq!(c.len(), m * n, "out length");
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
        let mut c = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] = c[i * n + j] + av * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let mut c = vec![0.0f64; m * n];
        f64::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        let want = naive(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 1.0 - i as f32 * 0.05).collect();
        let mut c = vec![1.0f32; m * n];
        f32::gemm(m, k, n, 1.0, &a, &b, 1.0, &mut c);
        let want = naive(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - (want + 1.0)).abs() < 1e-5);
        }
    }
}
