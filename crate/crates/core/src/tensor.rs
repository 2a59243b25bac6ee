//! Dense row-major tensors and the handful of GEMM shapes the model needs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` disagrees with the shape.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Columns of a matrix (last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.as_f64()).expect("finite cast"))
                .collect(),
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, overwriting or accumulating into `out`.
pub fn matmul<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bounds asserted above; all three views are dense row-major.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`. Weight-gradient shape.
pub fn matmul_at_b_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    // SAFETY: aᵀ is viewed with swapped strides over the same dense buffer.
    unsafe {
        F::gemm(
            k,
            m,
            n,
            F::one(),
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            F::one(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (m×k) = a (m×n) · bᵀ` for `b (k×n)`. Input-gradient shape.
pub fn matmul_a_bt<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    n: usize,
    k: usize,
    accumulate: bool,
) {
    assert!(a.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bᵀ is viewed with swapped strides over the same dense buffer.
    unsafe {
        F::gemm(
            m,
            n,
            k,
            F::one(),
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            beta,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// Strided view of a slice for [`gemm_view`]: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub const fn new(offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C = alpha · A(m×k) · B(k×n) + beta · C` over strided views; bounds are checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    av: View,
    b: &[F],
    bv: View,
    beta: F,
    c: &mut [F],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        cv.last_index(m, n) < c.len(),
        "gemm output view out of bounds"
    );
    if k > 0 {
        assert!(av.last_index(m, k) < a.len(), "gemm lhs view out of bounds");
        assert!(bv.last_index(k, n) < b.len(), "gemm rhs view out of bounds");
    }
    // SAFETY: the last addressed element of each view was bounds-checked above
    // and all strides are non-negative.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_shapes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·b where the stored matrix is aᵀ (k×m): compare against naive(a, b).
        let at = transpose(&a, m, k);
        let mut g = vec![0.0; m * n];
        matmul_at_b_acc(&at, &b, &mut g, k, m, n);
        for (x, y) in g.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut h = vec![1.0; m * n];
        matmul_a_bt(&a, &bt, &mut h, m, k, n, true);
        for (x, y) in h.iter().zip(&expect) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_and_cols() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row(1), &[4., 5., 6.]);
        let v = Tensor::<f32>::zeros(&[7]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 7);
    }
}
