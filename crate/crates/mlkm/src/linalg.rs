//! Dense symmetric positive-definite solves used by the exact baselines and
//! the variance estimator. Plain Cholesky keeps the cubic cost profile of the
//! exact solver visible to the scaling benchmarks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::SingularSystem);
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L Lᵀ x = b given the lower factor L.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Solve (A) x = b for symmetric positive-definite A, retrying once with a
/// small diagonal jitter (1e-10 · trace/n) before giving up.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    match cholesky(a) {
        Ok(l) => Ok(cholesky_solve(&l, b)),
        Err(Error::SingularSystem) => {
            let n = a.nrows();
            let jitter = 1e-10 * a.diag().sum() / n as f64;
            let mut aj = a.to_owned();
            for i in 0..n {
                aj[[i, i]] += jitter;
            }
            let l = cholesky(aj.view())?;
            Ok(cholesky_solve(&l, b))
        }
        Err(e) => Err(e),
    }
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = cholesky_solve(&l, e.view());
        inv.column_mut(j).assign(&col);
    }
    Ok(inv)
}

/// Rough 2-norm condition estimate for a symmetric positive-definite matrix:
/// power iteration for the largest eigenvalue and inverse iteration (through
/// the Cholesky factor) for the smallest.
pub fn condition_estimate_spd(a: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::DimMismatch("empty matrix".into()));
    }
    let l = cholesky(a)?;
    let mut v = Array1::<f64>::from_elem(n, (n as f64).sqrt().recip());
    let mut lam_max = 0.0;
    for _ in 0..30 {
        let w = a.dot(&v);
        lam_max = w.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Err(Error::SingularSystem);
        }
        v = w / norm;
    }
    let mut u = Array1::<f64>::from_elem(n, (n as f64).sqrt().recip());
    let mut lam_min_inv = 0.0;
    for _ in 0..30 {
        let w = cholesky_solve(&l, u.view());
        lam_min_inv = w.dot(&u);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Err(Error::SingularSystem);
        }
        u = w / norm;
    }
    if lam_min_inv <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(lam_max * lam_min_inv)
}

/// Ordinary least squares fit of y = slope·x + intercept.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
