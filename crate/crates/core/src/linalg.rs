//! Dense LAPACK/BLAS wrappers and a preconditioned conjugate gradient solver.

use crate::error::{Error, Result};

/// Eigenvalues (ascending) and column-major eigenvectors of a symmetric matrix.
/// Only the lower triangle of `a` is read; `a` is overwritten with the vectors.
pub fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let nn = n as i32;
    let mut w = vec![0.0; n];
    let mut info = 0;
    let mut work = vec![0.0; 1];
    let mut iwork = vec![0i32; 1];
    unsafe {
        lapack::dsyevd(b'V', b'L', nn, &mut a, nn, &mut w, &mut work, -1, &mut iwork, -1, &mut info);
    }
    if info != 0 {
        return Err(Error::ConvergenceFailure(format!("dsyevd workspace query info={info}")));
    }
    let lwork = work[0] as i32;
    let liwork = iwork[0];
    work = vec![0.0; lwork.max(1) as usize];
    iwork = vec![0; liwork.max(1) as usize];
    unsafe {
        lapack::dsyevd(b'V', b'L', nn, &mut a, nn, &mut w, &mut work, lwork, &mut iwork, liwork, &mut info);
    }
    if info != 0 {
        return Err(Error::ConvergenceFailure(format!("dsyevd info={info}")));
    }
    Ok((w, a))
}

/// Lowest `k` eigenvalues and column-major eigenvectors (`n x k`) of the symmetric
/// tridiagonal matrix with diagonal `d` and off-diagonal `e`.
pub fn tridiagonal_lowest(d: &[f64], e: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = d.len();
    let k = k.min(n);
    if k == 0 {
        return Ok((vec![], vec![]));
    }
    let mut d = d.to_vec();
    let mut e: Vec<f64> = e.iter().copied().chain(std::iter::once(0.0)).take(n).collect();
    let (nn, kk) = (n as i32, k as i32);
    let mut found = 0;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n * k];
    let mut isuppz = vec![0i32; 2 * k];
    let mut work = vec![0.0; 20 * n];
    let mut iwork = vec![0i32; 10 * n];
    let mut info = 0;
    unsafe {
        lapack::dstevr(
            b'V', b'I', nn, &mut d, &mut e, 0.0, 0.0, 1, kk, 0.0, &mut found, &mut w, &mut z, nn, &mut isuppz,
            &mut work, 20 * nn, &mut iwork, 10 * nn, &mut info,
        );
    }
    if info != 0 || found != kk {
        return Err(Error::ConvergenceFailure(format!("dstevr info={info}, {found} of {k} pairs")));
    }
    w.truncate(k);
    Ok((w, z))
}

/// `y = A x` for column-major `A` of shape `rows x cols`.
pub fn gemv(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    unsafe {
        blas::dgemv(b'N', rows as i32, cols as i32, 1.0, a, rows as i32, x, 1, 0.0, &mut y, 1);
    }
    y
}

/// `y = A^T x` for column-major `A` of shape `rows x cols`.
pub fn gemv_t(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    unsafe {
        blas::dgemv(b'T', rows as i32, cols as i32, 1.0, a, rows as i32, x, 1, 0.0, &mut y, 1);
    }
    y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve `A x = b` for SPD `A` given as a closure, with diagonal preconditioner.
/// `x` holds the initial guess.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if norm(&r) <= rtol * bnorm {
            return Ok(it);
        }
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    if norm(&r) <= rtol * bnorm {
        return Ok(max_iter);
    }
    Err(Error::ConvergenceFailure(format!(
        "conjugate gradient: residual {:e} after {max_iter} iterations",
        norm(&r) / bnorm
    )))
}
