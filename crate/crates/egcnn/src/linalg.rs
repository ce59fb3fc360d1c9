//! Symmetric eigendecomposition and derived matrix functions for the small
//! K x K correlation matrices. Matrices are row-major `Vec<f64>` slices.

use crate::error::{Error, Result};

/// Largest absolute entry, used for relative tolerances.
fn max_abs(m: &[f64]) -> f64 {
    m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

pub fn check_symmetric(m: &[f64], k: usize, tol: f64) -> Result<()> {
    let scale = 1.0 + max_abs(m);
    for i in 0..k {
        for j in (i + 1)..k {
            let d = (m[i * k + j] - m[j * k + i]).abs();
            if d > tol * scale {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {d}"
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, q)` where column `c` of the row-major `q` is the
/// eigenvector for `eigenvalues[c]`, so `m = q * diag(vals) * q^T`.
/// Eigenvalues are sorted ascending, deterministically.
pub fn sym_eigen(m: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(m.len(), k * k);
    check_symmetric(m, k, 1e-8)?;
    let mut a = m.to_vec();
    // Symmetrize exactly so rotations stay consistent.
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (a[i * k + j] + a[j * k + i]);
            a[i * k + j] = avg;
            a[j * k + i] = avg;
        }
    }
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }

    let scale = 1.0 + max_abs(&a);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..k {
            for j in (i + 1)..k {
                off = off.max(a[i * k + j].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..k {
            for r in (p + 1)..k {
                let apr = a[p * k + r];
                if apr.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * k + p];
                let arr = a[r * k + r];
                let theta = (arr - app) / (2.0 * apr);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for idx in 0..k {
                    let aip = a[idx * k + p];
                    let air = a[idx * k + r];
                    a[idx * k + p] = c * aip - s * air;
                    a[idx * k + r] = s * aip + c * air;
                }
                for idx in 0..k {
                    let api = a[p * k + idx];
                    let ari = a[r * k + idx];
                    a[p * k + idx] = c * api - s * ari;
                    a[r * k + idx] = s * api + c * ari;
                }
                for idx in 0..k {
                    let qip = q[idx * k + p];
                    let qir = q[idx * k + r];
                    q[idx * k + p] = c * qip - s * qir;
                    q[idx * k + r] = s * qip + c * qir;
                }
            }
        }
    }

    let mut vals: Vec<f64> = (0..k).map(|i| a[i * k + i]).collect();
    // Sort ascending, carrying eigenvector columns along.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| vals[x].total_cmp(&vals[y]));
    let sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut sorted_q = vec![0.0; k * k];
    for (new_c, &old_c) in order.iter().enumerate() {
        for row in 0..k {
            sorted_q[row * k + new_c] = q[row * k + old_c];
        }
    }
    vals = sorted_vals;
    Ok((vals, sorted_q))
}

/// Rebuild `q * diag(f(vals)) * q^T`.
fn from_eigen(vals: &[f64], q: &[f64], k: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for c in 0..k {
        let fv = f(vals[c]);
        if fv == 0.0 {
            continue;
        }
        for i in 0..k {
            let qi = q[i * k + c];
            if qi == 0.0 {
                continue;
            }
            for j in 0..k {
                out[i * k + j] += fv * qi * q[j * k + c];
            }
        }
    }
    // The construction is symmetric up to roundoff; make it exact.
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (out[i * k + j] + out[j * k + i]);
            out[i * k + j] = avg;
            out[j * k + i] = avg;
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix.
///
/// Eigenvalues within `-1e-10` of zero are clamped to zero; anything more
/// negative is a contract violation.
pub fn matrix_sqrt_psd(m: &[f64], k: usize) -> Result<Vec<f64>> {
    let (vals, q) = sym_eigen(m, k)?;
    let scale = 1.0 + vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    for &v in &vals {
        if v < -1e-10 * scale {
            return Err(Error::Contract(format!(
                "matrix_sqrt_psd: eigenvalue {v} is negative beyond tolerance"
            )));
        }
    }
    Ok(from_eigen(&vals, &q, k, |v| v.max(0.0).sqrt()))
}

/// Inverse of a symmetric positive definite matrix via eigendecomposition.
pub fn sym_inverse_pd(m: &[f64], k: usize) -> Result<Vec<f64>> {
    let (vals, q) = sym_eigen(m, k)?;
    for &v in &vals {
        if v <= 0.0 {
            return Err(Error::Contract(format!(
                "sym_inverse_pd: eigenvalue {v} is not positive"
            )));
        }
    }
    Ok(from_eigen(&vals, &q, k, |v| 1.0 / v))
}

pub fn mat_mul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for l in 0..m {
            let av = a[i * m + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += av * b[l * p + j];
            }
        }
    }
    out
}

pub fn trace(m: &[f64], k: usize) -> f64 {
    (0..k).map(|i| m[i * k + i]).sum()
}
