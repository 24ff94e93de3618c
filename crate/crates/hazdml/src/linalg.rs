//! Small dense linear-algebra kernels used across the crate.
//!
//! Everything here targets the modest dimensions that arise in practice
//! (tens to a few hundred coordinates), so plain `O(n^3)` factorizations
//! without blocking are adequate and keep results bit-reproducible across
//! runs and thread counts.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (leading minor {0} has non-positive pivot {1:.3e})")]
    NotPositiveDefinite(usize, f64),
    #[error("singular linear system (pivot {0} is {1:.3e})")]
    Singular(usize, f64),
    #[error("rank collapse in pivoted QR: |R[{idx},{idx}]| = {pivot:.3e} below tol {tol:.3e} of leading pivot")]
    RankCollapse { idx: usize, pivot: f64, tol: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Shape(format!("cholesky of {}x{}", n, a.ncols())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite(j, d));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let t = y[k];
            y[i] -= l[[i, k]] * t;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Solves `L' x = y` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = y.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = x[k];
            x[i] -= l[[k, i]] * t;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves the SPD system `A x = b` through a Cholesky factorization.
pub fn solve_spd(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
    let l = cholesky(a)?;
    let y = solve_lower(&l.view(), b);
    Ok(solve_lower_transpose(&l.view(), &y.view()))
}

/// Solves `A X = B` column-by-column for SPD `A`.
pub fn solve_spd_multi(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let l = cholesky(a)?;
    let mut x = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let y = solve_lower(&l.view(), &col);
        let xi = solve_lower_transpose(&l.view(), &y.view());
        x.column_mut(j).assign(&xi);
    }
    Ok(x)
}

/// Log-determinant of an SPD matrix via its Cholesky factor.
pub fn logdet_spd(a: &ArrayView2<f64>) -> Result<f64, LinalgError> {
    let l = cholesky(a)?;
    Ok(2.0 * (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>())
}

/// Solves a general square system by LU with partial pivoting.
pub fn solve_general(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Shape(format!(
            "solve of {}x{} with rhs {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    let mut m = a.to_owned();
    let mut x = b.to_owned();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[[col, col]].abs();
        for r in (col + 1)..n {
            let v = m[[r, col]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= f64::EPSILON * 64.0 * n as f64 {
            return Err(LinalgError::Singular(col, best));
        }
        if piv != col {
            for c in 0..n {
                m.swap([col, c], [piv, c]);
            }
            x.swap(col, piv);
        }
        for r in (col + 1)..n {
            let factor = m[[r, col]] / m[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let t = m[[col, c]];
                m[[r, c]] -= factor * t;
            }
            let t = x[col];
            x[r] -= factor * t;
        }
    }
    for i in (0..n).rev() {
        for c in (i + 1)..n {
            let t = x[c];
            x[i] -= m[[i, c]] * t;
        }
        x[i] /= m[[i, i]];
    }
    Ok(x)
}

/// Householder QR with column pivoting of a tall matrix (`n >= r`).
///
/// Returns `(q, r, perm)` with `a[:, perm] = q r`, `q` of shape `n x r`
/// having orthonormal columns and `r` upper triangular with diagonal of
/// non-increasing magnitude.
pub fn qr_pivoted(a: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
    let n = a.nrows();
    let r = a.ncols();
    let mut work = a.to_owned();
    let mut perm: Vec<usize> = (0..r).collect();
    let mut col_norms: Vec<f64> = (0..r)
        .map(|j| work.column(j).iter().map(|v| v * v).sum::<f64>())
        .collect();
    // Householder vectors are accumulated in-place below the diagonal.
    let mut betas = vec![0.0f64; r];
    for k in 0..r {
        let mut piv = k;
        let mut best = col_norms[k];
        for j in (k + 1)..r {
            if col_norms[j] > best {
                best = col_norms[j];
                piv = j;
            }
        }
        if piv != k {
            perm.swap(k, piv);
            col_norms.swap(k, piv);
            for i in 0..n {
                work.swap([i, k], [i, piv]);
            }
        }
        // Build the Householder reflector for column k.
        let mut sigma = 0.0;
        for i in k..n {
            sigma += work[[i, k]] * work[[i, k]];
        }
        let alpha = -work[[k, k]].signum() * sigma.sqrt();
        if sigma == 0.0 {
            betas[k] = 0.0;
            continue;
        }
        let v0 = work[[k, k]] - alpha;
        betas[k] = -v0 / alpha;
        work[[k, k]] = alpha;
        for i in (k + 1)..n {
            work[[i, k]] /= v0;
        }
        // Apply to the trailing columns.
        for j in (k + 1)..r {
            let mut dot = work[[k, j]];
            for i in (k + 1)..n {
                dot += work[[i, k]] * work[[i, j]];
            }
            dot *= betas[k];
            work[[k, j]] -= dot;
            for i in (k + 1)..n {
                let t = work[[i, k]];
                work[[i, j]] -= dot * t;
            }
            col_norms[j] -= work[[k, j]] * work[[k, j]];
            if col_norms[j] < 0.0 {
                col_norms[j] = 0.0;
            }
        }
        col_norms[k] = 0.0;
    }
    let mut rmat = Array2::<f64>::zeros((r, r));
    for i in 0..r {
        for j in i..r {
            rmat[[i, j]] = work[[i, j]];
        }
    }
    // Recover Q by applying the stored reflectors to the identity.
    let mut q = Array2::<f64>::zeros((n, r));
    for j in 0..r {
        q[[j, j]] = 1.0;
    }
    for k in (0..r).rev() {
        if betas[k] == 0.0 {
            continue;
        }
        for j in 0..r {
            let mut dot = q[[k, j]];
            for i in (k + 1)..n {
                dot += work[[i, k]] * q[[i, j]];
            }
            dot *= betas[k];
            q[[k, j]] -= dot;
            for i in (k + 1)..n {
                let t = work[[i, k]];
                q[[i, j]] -= dot * t;
            }
        }
    }
    (q, rmat, perm)
}

/// Minimal-norm solution of `L' alpha = u` for a tall full-column-rank `L`.
///
/// Uses a column-pivoted QR of `L`; a relative diagonal tolerance guards
/// against a numerically rank-deficient basis.
pub fn least_norm_transpose_solve(
    l: &ArrayView2<f64>,
    u: &ArrayView1<f64>,
    rel_tol: f64,
) -> Result<Array1<f64>, LinalgError> {
    let r = l.ncols();
    if u.len() != r {
        return Err(LinalgError::Shape(format!(
            "least-norm solve: {} columns vs rhs {}",
            r,
            u.len()
        )));
    }
    let (q, rmat, perm) = qr_pivoted(l);
    let lead = rmat[[0, 0]].abs();
    for i in 0..r {
        let p = rmat[[i, i]].abs();
        if p < rel_tol * lead || p == 0.0 {
            return Err(LinalgError::RankCollapse { idx: i, pivot: p, tol: rel_tol });
        }
    }
    // L' alpha = u with alpha = Q y gives R' y = P' u.
    let mut rhs = Array1::<f64>::zeros(r);
    for (pos, &orig) in perm.iter().enumerate() {
        rhs[pos] = u[orig];
    }
    let y = solve_lower(&rmat.t(), &rhs.view());
    Ok(q.dot(&y))
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
///
/// Intended for validation on small matrices; returns eigenvalues in
/// ascending order.
pub fn symmetric_eigenvalues(a: &ArrayView2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.to_owned();
    // Symmetrize defensively; callers pass matrices that are symmetric up
    // to rounding.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    let scale: f64 = m.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]].abs();
            }
        }
        if off <= 1e-14 * scale * (n * n) as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[[k, p]];
                    let akq = m[[k, q]];
                    m[[k, p]] = c * akp - s * akq;
                    m[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[[p, k]];
                    let aqk = m[[q, k]];
                    m[[p, k]] = c * apk - s * aqk;
                    m[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}
