//! Minimal numeric layer: a float abstraction, a shaped buffer, and
//! row-major matmul wrappers over `matrixmultiply`.
//!
//! The model code is generic over [`Real`] so the same forward/backward
//! passes run in f32 for training and in f64 for gradient checks and the
//! objective-equivalence probe, where f32 rounding would drown the signal.

use std::fmt::Debug;
use std::iter::Sum;

/// Float scalar the model math is generic over. Implemented for f32/f64.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Sum + Default + Debug + Copy + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major general matrix multiply, `c = alpha*a@b + beta*c`, with
    /// explicit strides so transposed views need no copies.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n`, `m x n` elements under the
    /// given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor. Parameters are at most rank 2 here, but the
/// shape is kept as a vector so checkpoints stay self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row view for rank-2 tensors.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// `c = a @ b` with `a: m x k`, `b: k x n`, all row-major.
pub fn matmul<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_nn(c, a, b, m, k, n, T::one(), T::zero());
}

/// `c += a @ b`.
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_nn(c, a, b, m, k, n, T::one(), T::one());
}

fn gemm_nn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, alpha: T, beta: T) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
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

/// `c (+)= a^T @ b` where `a: k x m` row-major, `b: k x n` row-major.
/// Used for weight gradients (`dW = X^T dY`).
pub fn matmul_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a @ b^T` where `a: m x k` row-major, `b: n x k` row-major.
/// Used for input gradients (`dX = dY W^T`).
pub fn matmul_nt<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically careful softmax into `out`, subtracting the row max.
/// Accumulation stays in `T`; sampling-time softmax upgrades to f64 at the
/// call site instead.
pub fn softmax_row<T: Real>(out: &mut [T], row: &[T]) {
    debug_assert_eq!(out.len(), row.len());
    let mut max = T::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// log(softmax(row)[idx]) computed in f64 regardless of `T`, for loss
/// accounting.
pub fn log_softmax_at<T: Real>(row: &[T], idx: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        max = max.max(x.as_f64());
    }
    let mut sum = 0.0f64;
    for &x in row {
        sum += (x.as_f64() - max).exp();
    }
    (row[idx].as_f64() - max) - sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_f32_and_f64() {
        let (m, k, n) = (3, 4, 5);
        let a_f64: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b_f64: Vec<f64> = (0..k * n).map(|i| 0.7 - (i as f64) * 0.1).collect();
        let mut naive = vec![0.0f64; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    naive[i * n + j] += a_f64[i * k + l] * b_f64[l * n + j];
                }
            }
        }
        let mut c64 = vec![0.0f64; m * n];
        matmul(&mut c64, &a_f64, &b_f64, m, k, n);
        for (x, y) in c64.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        let a32: Vec<f32> = a_f64.iter().map(|&x| x as f32).collect();
        let b32: Vec<f32> = b_f64.iter().map(|&x| x as f32).collect();
        let mut c32 = vec![0.0f32; m * n];
        matmul(&mut c32, &a32, &b32, m, k, n);
        for (x, y) in c32.iter().zip(&naive) {
            assert!((x.as_f64() - y).abs() < 1e-5);
        }
    }

    #[test]
    fn transposed_wrappers_match_naive() {
        let (m, k, n) = (4, 3, 2);
        // a stored k x m, b stored k x n: c = a^T b.
        let a: Vec<f64> = (0..k * m).map(|i| i as f64 * 0.25 - 0.8).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 0.5 - i as f64 * 0.2).collect();
        let mut want = vec![0.0f64; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    want[i * n + j] += a[l * m + i] * b[l * n + j];
                }
            }
        }
        let mut got = vec![0.0f64; m * n];
        matmul_tn_acc(&mut got, &a, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored m x k, b stored n x k: c = a b^T.
        let a2: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b2: Vec<f64> = (0..n * k).map(|i| (i as f64).cos()).collect();
        let mut want2 = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    want2[i * n + j] += a2[i * k + l] * b2[j * k + l];
                }
            }
        }
        let mut got2 = vec![0.0f64; m * n];
        matmul_nt(&mut got2, &a2, &b2, m, k, n);
        for (x, y) in got2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let row = [1.5f32, -2.0, 0.25, 9.0];
        let mut out = [0.0f32; 4];
        softmax_row(&mut out, &row);
        let sum: f32 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(out.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn log_softmax_matches_direct() {
        let row = [0.1f64, 0.2, -0.4, 2.0];
        let direct: f64 = {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            (row[2].exp() / z).ln()
        };
        assert!((log_softmax_at(&row, 2) - direct).abs() < 1e-12);
    }
}
