//! Dense `N x C x H x W` tensors and the scalar abstraction behind them.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::Debug;

use num_traits::Float;

pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `C = A * B + beta * C` with explicit strides; see
    /// `matrixmultiply::sgemm`.
    ///
    /// # Safety
    ///
    /// The pointers and strides must address valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all row-major.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        S::gemm_raw(
            m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `c (m x n) = a (m x k) * b^T + beta * c` where `b` is stored `n x k`.
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as above, `b` read with transposed strides.
    unsafe {
        S::gemm_raw(
            m, k, n, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `c (m x n) = a^T * b (k x n) + beta * c` where `a` is stored `k x m`.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], beta: S) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above, `a` read with transposed strides.
    unsafe {
        S::gemm_raw(
            m, k, n, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// Row-major `N x C x H x W` buffer. Vectors are stored with `H = W = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![S::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer size");
        Self { n, c, h, w, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[S] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [S] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn plane(&self, i: usize, c: usize) -> &[S] {
        let hw = self.hw();
        let start = (i * self.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, c: usize) -> &mut [S] {
        let hw = self.hw();
        let start = (i * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree_with_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c, 0.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c, 0.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c = vec![1.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c, 1.0);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - (y + 1.0)).abs() < 1e-12));
    }
}
