//! Dense row-major kernels shared by the tape and the classical solver.

use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` where `op(x)` is `x` or `x^T`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
/// All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer length to the dimensions and
    // strides handed to the kernel, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Lower Cholesky factor of a symmetric positive-definite `n x n` matrix.
pub fn cholesky(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            let diag_max = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
            return Err(Error::LinearSolve(format!(
                "matrix not positive definite: pivot {j} = {d:.3e} (n = {n}, max |diag| = {diag_max:.3e})"
            )));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` in place, `B` being `n x m` row-major.
pub fn cholesky_solve(n: usize, l: &[f64], b: &mut [f64], m: usize) {
    debug_assert_eq!(b.len(), n * m);
    // forward: L y = b
    for i in 0..n {
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                for c in 0..m {
                    b[i * m + c] -= lip * b[p * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            b[i * m + c] /= d;
        }
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        for p in (i + 1)..n {
            let lpi = l[p * n + i];
            if lpi != 0.0 {
                for c in 0..m {
                    b[i * m + c] -= lpi * b[p * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            b[i * m + c] /= d;
        }
    }
}
