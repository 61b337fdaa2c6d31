//! Row-major matrix products on flat slices, backed by nalgebra.
//!
//! A row-major `r × c` slice read as column-major is its `c × r` transpose,
//! which is how each product below maps onto nalgebra's `gemm`.

use nalgebra::{DMatrixView, DMatrixViewMut};

/// `y[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn_acc(y: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut yt = DMatrixViewMut::from_slice(y, n, m);
    yt.gemm(1.0, &DMatrixView::from_slice(b, n, k), &DMatrixView::from_slice(a, k, m), 1.0);
}

/// `y[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt_acc(y: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut yt = DMatrixViewMut::from_slice(y, k, m);
    yt.gemm_tr(1.0, &DMatrixView::from_slice(b, n, k), &DMatrixView::from_slice(a, n, m), 1.0);
}

/// `y[k×n] = a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(y: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    if k == 0 || n == 0 {
        return;
    }
    if m == 0 {
        y.fill(0.0);
        return;
    }
    let a_mat = DMatrixView::from_slice(a, k, m).transpose();
    let mut yt = DMatrixViewMut::from_slice(y, n, k);
    yt.gemm(1.0, &DMatrixView::from_slice(b, n, m), &a_mat, 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    y[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        y
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        (0..c * r).map(|i| a[(i % r) * c + i / r]).collect()
    }

    fn seq(len: usize, s: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + s) * 0.37).sin()).collect()
    }

    #[test]
    fn products_match_naive() {
        let (m, k, n) = (3, 5, 7);
        let a = seq(m * k, 0.0);
        let b = seq(k * n, 1.0);
        let want = naive(&a, &b, m, k, n);

        let mut y = vec![1.0; m * n];
        gemm_nn_acc(&mut y, &a, &b, m, k, n);
        for (g, w) in y.iter().zip(&want) {
            assert!((g - 1.0 - w).abs() < 1e-12);
        }

        let c = seq(k * n, 2.0);
        let mut y = vec![0.0; m * k];
        gemm_nt_acc(&mut y, &want, &c, m, n, k);
        let w2 = naive(&want, &transpose(&c, k, n), m, n, k);
        for (g, w) in y.iter().zip(&w2) {
            assert!((g - w).abs() < 1e-12);
        }

        let mut y = vec![9.0; k * n];
        gemm_tn(&mut y, &a, &want, m, k, n);
        let w3 = naive(&transpose(&a, m, k), &want, k, m, n);
        for (g, w) in y.iter().zip(&w3) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
