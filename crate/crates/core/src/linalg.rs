//! Dense symmetric linear algebra used by the back-end fits.
//!
//! Everything here is deterministic: fixed iteration orders, no pivot
//! heuristics that depend on runtime state. Eigendecomposition uses cyclic
//! Jacobi rotations, which is accurate for the small symmetric matrices
//! (covariances, scatter matrices) this crate works with.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used when inverting nominally-PSD matrices.
pub const EIG_REL_FLOOR: f64 = 1e-12;

/// Force exact symmetry: `(A + A') / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    out
}

/// Eigendecomposition of a real symmetric matrix.
///
/// Returns eigenvalues in descending order with matching eigenvectors as the
/// columns of `vectors`. Each eigenvector's sign is normalized so that its
/// first decisively nonzero component is positive, which keeps fitted
/// transforms reproducible across platforms.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps upper-triangle pairs in a fixed order until the off-diagonal mass
/// is negligible relative to the Frobenius norm.
pub fn sym_eigen(matrix: ArrayView2<f64>) -> Result<SymEigen> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "sym_eigen input contains non-finite entries".into(),
        ));
    }

    let mut a = symmetrize(&matrix.to_owned());
    let mut v: Array2<f64> = Array2::eye(n);

    if n > 1 {
        let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tol = if fro > 0.0 { fro * 1e-15 } else { 0.0 };
        const MAX_SWEEPS: usize = 64;
        for _sweep in 0..MAX_SWEEPS {
            let off: f64 = {
                let mut s = 0.0;
                for p in 0..n {
                    for q in (p + 1)..n {
                        s += a[[p, q]] * a[[p, q]];
                    }
                }
                (2.0 * s).sqrt()
            };
            if off <= tol {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[[p, q]];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[[p, p]];
                    let aqq = a[[q, q]];
                    // Skip rotations that cannot change anything at f64 scale.
                    if apq.abs() <= 1e-300 {
                        a[[p, q]] = 0.0;
                        a[[q, p]] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                    a[[p, q]] = 0.0;
                    a[[q, p]] = 0.0;

                    for k in 0..n {
                        let vkp = v[[k, p]];
                        let vkq = v[[k, q]];
                        v[[k, p]] = c * vkp - s * vkq;
                        v[[k, q]] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    // Sort descending by eigenvalue; stable so coincident eigenvalues keep
    // the sweep order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());

    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[[src, src]];
        let mut max_abs = 0.0f64;
        for k in 0..n {
            max_abs = max_abs.max(v[[k, src]].abs());
        }
        let thresh = max_abs * 1e-8;
        let mut sign = 1.0;
        for k in 0..n {
            if v[[k, src]].abs() > thresh {
                if v[[k, src]] < 0.0 {
                    sign = -1.0;
                }
                break;
            }
        }
        for k in 0..n {
            vectors[[k, dst]] = sign * v[[k, src]];
        }
    }

    Ok(SymEigen { values, vectors })
}

/// Rebuild `V diag(f(lambda)) V'` from an eigendecomposition.
fn rebuild(eig: &SymEigen, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for (j, col) in scaled.axis_iter_mut(ndarray::Axis(1)).enumerate() {
        let s = f(eig.values[j]);
        for x in col {
            *x *= s;
        }
    }
    let mut out = Array2::zeros((n, n));
    ndarray::linalg::general_mat_mul(1.0, &scaled, &eig.vectors.t(), 0.0, &mut out);
    out
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues below
/// `EIG_REL_FLOOR * lambda_max` are treated as zero.
pub fn spd_sqrt(matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(matrix)?;
    let max = eig.values.iter().cloned().fold(0.0f64, f64::max);
    let floor = max * EIG_REL_FLOOR;
    Ok(rebuild(&eig, |l| if l > floor { l.sqrt() } else { 0.0 }))
}

/// Symmetric inverse square root. Fails when the matrix is not positive
/// definite up to the relative floor.
pub fn spd_inv_sqrt(matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(matrix)?;
    let max = eig.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate(
            "matrix has no positive eigenvalues; cannot invert".into(),
        ));
    }
    let floor = max * EIG_REL_FLOOR;
    if eig.values.iter().any(|&l| l <= floor) {
        return Err(Error::Degenerate(format!(
            "matrix is singular to working precision (min eigenvalue {:.3e}, max {:.3e})",
            eig.values[eig.values.len() - 1],
            max
        )));
    }
    Ok(rebuild(&eig, |l| 1.0 / l.sqrt()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = matrix[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "matrix not positive definite (pivot {} = {:.3e})",
                        i, sum
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = matrix.nrows();
    let l = cholesky(matrix)?;
    let mut inv = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, e.view());
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    Ok(symmetrize(&inv))
}

/// `ln det A` for symmetric positive definite `A`.
pub fn spd_log_det(matrix: ArrayView2<f64>) -> Result<f64> {
    let l = cholesky(matrix)?;
    let mut ld = 0.0;
    for i in 0..l.nrows() {
        ld += l[[i, i]].ln();
    }
    Ok(2.0 * ld)
}

/// Generalized symmetric eigenproblem `M a = lambda C a` with `C` symmetric
/// positive definite. Returns eigenvalues descending and the matching
/// directions as the ROWS of the returned matrix, scaled so that
/// `rows * C * rows' = I` (simultaneous diagonalization).
pub fn generalized_sym_eigen(
    m: ArrayView2<f64>,
    c: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if m.nrows() != c.nrows() || m.ncols() != c.ncols() {
        return Err(Error::DimensionMismatch(
            "generalized eigenproblem matrices must have equal shape".into(),
        ));
    }
    let w = spd_inv_sqrt(c)?;
    let mut wm = Array2::zeros(m.raw_dim());
    ndarray::linalg::general_mat_mul(1.0, &w, &m.to_owned(), 0.0, &mut wm);
    let mut b = Array2::zeros(m.raw_dim());
    ndarray::linalg::general_mat_mul(1.0, &wm, &w, 0.0, &mut b);
    let eig = sym_eigen(symmetrize(&b).view())?;
    // rows_i = (W u_i)'
    let mut dirs = Array2::zeros(m.raw_dim());
    ndarray::linalg::general_mat_mul(1.0, &eig.vectors.t().to_owned(), &w, 0.0, &mut dirs);
    Ok((eig.values, dirs))
}

/// Biased (divide-by-N) sample covariance of the rows of `x`.
pub fn covariance(x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    assert!(n > 0, "covariance of an empty sample");
    let mut mean = Array1::<f64>::zeros(d);
    for row in x.rows() {
        mean += &row;
    }
    mean /= n as f64;
    let mut centered = x.to_owned();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let mut cov = Array2::zeros((d, d));
    ndarray::linalg::general_mat_mul(1.0 / n as f64, &centered.t(), &centered, 0.0, &mut cov);
    (mean, symmetrize(&cov))
}

/// Frobenius norm.
pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
