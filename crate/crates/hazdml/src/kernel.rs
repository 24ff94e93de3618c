//! Kernel evaluation, low-rank Gram factorization, and transfer of fitted
//! coordinates onto new data.
//!
//! Each additive component of the covariate adjustment is associated with a
//! kernel over one to three covariate columns: either a linear kernel
//! `k(x, x') = sum_l x_l x'_l` or a Gaussian kernel
//! `k(x, x') = exp(-sum_l (x_l - x'_l)^2 / (2 sigma^2))`.
//!
//! Gram matrices are never materialized in full during fitting. A pivoted
//! incomplete Cholesky factorization `G ~ L L'` selects rows greedily by
//! largest residual diagonal until the residual trace drops to `tol * n`,
//! and the fit is parametrized by the orthonormal coordinates `u = L' a`:
//! the function values are `L u` and the squared reproducing-kernel norm of
//! the component is `|u|^2`, so penalties and Hessian blocks reduce to
//! ordinary Euclidean algebra in `u`.

use crate::linalg::{self, LinalgError};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel: {0}")]
    InvalidSpec(String),
    #[error("kernel requested over an empty row set")]
    EmptyRows,
    #[error("Gram diagonal contains a non-finite value at row {0}")]
    NonFiniteDiagonal(usize),
    #[error("degenerate low-rank basis: {0}")]
    DegenerateBasis(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Linear,
    Gaussian,
}

/// One additive kernel component of the covariate adjustment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Covariate column indices the kernel looks at (one to three).
    pub covariate_indices: Vec<usize>,
    /// Gaussian length scale; ignored for linear kernels.
    pub bandwidth: f64,
    /// Ridge weight on the component's squared RKHS norm. Zero is allowed
    /// (an unpenalized component, typical for linear kernels).
    pub reg_lambda: f64,
}

impl KernelSpec {
    pub fn linear(covariate: usize) -> Self {
        KernelSpec {
            kind: KernelKind::Linear,
            covariate_indices: vec![covariate],
            bandwidth: 1.0,
            reg_lambda: 0.0,
        }
    }

    pub fn gaussian(covariates: &[usize], bandwidth: f64, reg_lambda: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Gaussian,
            covariate_indices: covariates.to_vec(),
            bandwidth,
            reg_lambda,
        }
    }

    pub fn validate(&self, n_covariates: usize) -> Result<(), KernelError> {
        if self.covariate_indices.is_empty() || self.covariate_indices.len() > 3 {
            return Err(KernelError::InvalidSpec(format!(
                "kernel must use 1..=3 covariates, got {}",
                self.covariate_indices.len()
            )));
        }
        for &j in &self.covariate_indices {
            if j >= n_covariates {
                return Err(KernelError::InvalidSpec(format!(
                    "covariate index {j} out of range (dataset has {n_covariates})"
                )));
            }
        }
        if self.kind == KernelKind::Gaussian && !(self.bandwidth > 0.0) {
            return Err(KernelError::InvalidSpec(format!(
                "gaussian bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.reg_lambda >= 0.0) {
            return Err(KernelError::InvalidSpec(format!(
                "regularization weight must be non-negative, got {}",
                self.reg_lambda
            )));
        }
        Ok(())
    }

    /// Extracts the kernel's covariate columns into a contiguous buffer.
    fn project(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let m = self.covariate_indices.len();
        let mut out = Array2::<f64>::zeros((x.nrows(), m));
        for (c, &j) in self.covariate_indices.iter().enumerate() {
            out.column_mut(c).assign(&x.column(j));
        }
        out
    }

    fn eval_projected(&self, a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
        match self.kind {
            KernelKind::Linear => a.iter().zip(b.iter()).map(|(u, v)| u * v).sum(),
            KernelKind::Gaussian => {
                let mut sq = 0.0;
                for (u, v) in a.iter().zip(b.iter()) {
                    sq += (u - v) * (u - v);
                }
                (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }

    fn diag_projected(&self, a: &ArrayView1<f64>) -> f64 {
        match self.kind {
            KernelKind::Linear => a.iter().map(|u| u * u).sum(),
            KernelKind::Gaussian => 1.0,
        }
    }
}

/// Dense Gram matrix between two row sets. Intended for validation and
/// small transfers; fitting uses [`incomplete_cholesky`].
pub fn gram(spec: &KernelSpec, rows_a: &ArrayView2<f64>, rows_b: &ArrayView2<f64>) -> Array2<f64> {
    let pa = spec.project(rows_a);
    let pb = spec.project(rows_b);
    let mut g = Array2::<f64>::zeros((pa.nrows(), pb.nrows()));
    for i in 0..pa.nrows() {
        let ri = pa.row(i);
        for j in 0..pb.nrows() {
            g[[i, j]] = spec.eval_projected(&ri, &pb.row(j));
        }
    }
    g
}

/// Dense evaluation of `sum_i alpha_i k(x_new, x_i)` over training rows.
pub fn eval_dense(
    spec: &KernelSpec,
    train_x: &ArrayView2<f64>,
    alpha: &ArrayView1<f64>,
    new_x: &ArrayView2<f64>,
) -> Array1<f64> {
    let pt = spec.project(train_x);
    let pn = spec.project(new_x);
    let mut out = Array1::<f64>::zeros(pn.nrows());
    for i in 0..pn.nrows() {
        let ri = pn.row(i);
        let mut acc = 0.0;
        for j in 0..pt.nrows() {
            acc += alpha[j] * spec.eval_projected(&ri, &pt.row(j));
        }
        out[i] = acc;
    }
    out
}

/// Result of a pivoted incomplete Cholesky factorization `G ~ L L'`.
#[derive(Debug, Clone)]
pub struct LowRankBasis {
    /// Factor of shape `(rows, rank)`.
    pub l: Array2<f64>,
    /// Source row index chosen at each step, in pivot order.
    pub pivots: Vec<usize>,
    /// Residual trace `tr(G - L L')` when the factorization stopped.
    pub residual_trace: f64,
    /// Stopping tolerance that was in force (`stop at residual <= tol * rows`).
    pub tol: f64,
}

impl LowRankBasis {
    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.l.nrows()
    }
}

/// Greedy pivoted incomplete Cholesky of the Gram matrix of `x` under
/// `spec`, computing one Gram column per accepted pivot.
///
/// Pivots maximize the current residual diagonal (ties broken by lowest row
/// index, so the factorization is deterministic). The loop stops once the
/// residual trace is at most `tol * n_rows`, or at full rank.
pub fn incomplete_cholesky(
    spec: &KernelSpec,
    x: &ArrayView2<f64>,
    tol: f64,
) -> Result<LowRankBasis, KernelError> {
    let n = x.nrows();
    if n == 0 {
        return Err(KernelError::EmptyRows);
    }
    let px = spec.project(x);
    let mut diag: Vec<f64> = (0..n).map(|i| spec.diag_projected(&px.row(i))).collect();
    for (i, d) in diag.iter().enumerate() {
        if !d.is_finite() {
            return Err(KernelError::NonFiniteDiagonal(i));
        }
    }
    let threshold = tol * n as f64;
    let mut cols: Vec<Array1<f64>> = Vec::new();
    let mut pivots: Vec<usize> = Vec::new();
    let mut residual: f64 = diag.iter().sum();

    while residual > threshold && cols.len() < n {
        // Largest residual diagonal, lowest index on ties.
        let mut p = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in diag.iter().enumerate() {
            if d > best {
                best = d;
                p = i;
            }
        }
        if best <= 0.0 {
            // Numerically exhausted even though the trace target was not
            // hit; nothing further can be extracted.
            break;
        }
        let piv_sqrt = best.sqrt();
        let rp = px.row(p);
        let mut col = Array1::<f64>::zeros(n);
        for i in 0..n {
            col[i] = spec.eval_projected(&px.row(i), &rp);
        }
        for (j, prev) in cols.iter().enumerate() {
            let lpj = prev[p];
            if lpj == 0.0 {
                continue;
            }
            let _ = j;
            for i in 0..n {
                col[i] -= prev[i] * lpj;
            }
        }
        for i in 0..n {
            col[i] /= piv_sqrt;
        }
        for i in 0..n {
            diag[i] -= col[i] * col[i];
        }
        // Exact zeros keep already-pivoted rows out of later selections.
        diag[p] = 0.0;
        pivots.push(p);
        cols.push(col);
        residual = diag.iter().map(|d| d.max(0.0)).sum();
    }

    let rank = cols.len();
    let mut l = Array2::<f64>::zeros((n, rank));
    for (j, col) in cols.into_iter().enumerate() {
        l.column_mut(j).assign(&col);
    }
    Ok(LowRankBasis { l, pivots, residual_trace: residual, tol })
}

/// Fitted coordinates carried onto a combined (training + new) row set.
#[derive(Debug, Clone)]
pub struct Transfer {
    /// Representer weights over the training rows solving `L' alpha = u`.
    pub alpha: Array1<f64>,
    /// Factorization of the combined Gram matrix, rows ordered training
    /// first, then new.
    pub combined: LowRankBasis,
    /// Coordinates of the fitted component in the combined basis.
    pub u_bar: Array1<f64>,
    /// Component values on the combined rows, `L_combined u_bar`.
    pub values: Array1<f64>,
}

/// Re-expresses a component fitted as coordinates `u_hat` on the training
/// basis in a basis spanning training and new rows.
///
/// The fitted function is `f = sum_i alpha_i k(., x_i)` with
/// `alpha = pinv(L') u_hat` (minimal-norm representer weights). A fresh
/// factorization over `[train; new]` provides shared coordinates
/// `u_bar = L_combined' [alpha; 0]` in which the same function can be
/// evaluated and differentiated on either split.
pub fn transfer_coefficients(
    spec: &KernelSpec,
    train_x: &ArrayView2<f64>,
    train_basis: &LowRankBasis,
    u_hat: &ArrayView1<f64>,
    new_x: &ArrayView2<f64>,
    combined_tol: f64,
    pinv_tol: f64,
) -> Result<Transfer, KernelError> {
    let n_train = train_x.nrows();
    if train_basis.n_rows() != n_train {
        return Err(KernelError::InvalidSpec(format!(
            "basis has {} rows but training data has {n_train}",
            train_basis.n_rows()
        )));
    }
    let alpha = linalg::least_norm_transpose_solve(&train_basis.l.view(), u_hat, pinv_tol)?;
    let mut combined_x = Array2::<f64>::zeros((n_train + new_x.nrows(), train_x.ncols()));
    combined_x.slice_mut(s![..n_train, ..]).assign(train_x);
    combined_x.slice_mut(s![n_train.., ..]).assign(new_x);
    let combined = incomplete_cholesky(spec, &combined_x.view(), combined_tol)?;
    // Only training rows carry weight: u_bar = L' [alpha; 0].
    let train_block = combined.l.slice(s![..n_train, ..]);
    let u_bar = train_block.t().dot(&alpha);
    let values = combined.l.dot(&u_bar);
    Ok(Transfer { alpha, combined, u_bar, values })
}

/// Stacks two row sets vertically (training first). Convenience for
/// callers that need the combined covariate matrix alongside a transfer.
pub fn stack_rows(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("row stacking")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn gaussian_gram_matches_hand_values() {
        let spec = KernelSpec::gaussian(&[0], 2.0, 1.0);
        let a = array![[0.0], [2.0]];
        let g = gram(&spec, &a.view(), &a.view());
        assert_abs_diff_eq!(g[[0, 0]], 1.0, epsilon = 1e-15);
        // exp(-(2-0)^2 / (2 * 4)) = exp(-0.5)
        assert_abs_diff_eq!(g[[0, 1]], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g[[1, 0]], g[[0, 1]], epsilon = 1e-15);
    }

    #[test]
    fn linear_gram_is_outer_product() {
        let spec = KernelSpec::linear(1);
        let a = array![[9.0, 1.0], [9.0, -2.0], [9.0, 0.5]];
        let g = gram(&spec, &a.view(), &a.view());
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(g[[i, j]], a[[i, 1]] * a[[j, 1]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn multi_column_gaussian_uses_shared_bandwidth() {
        let spec = KernelSpec::gaussian(&[0, 1], 1.5, 1.0);
        let a = array![[0.0, 0.0], [1.0, -1.0]];
        let g = gram(&spec, &a.view(), &a.view());
        let want = (-(1.0 + 1.0) / (2.0 * 1.5f64 * 1.5)).exp();
        assert_abs_diff_eq!(g[[0, 1]], want, epsilon = 1e-15);
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let x = random_rows(40, 3, 11);
        for spec in [KernelSpec::gaussian(&[0, 2], 0.8, 1.0), KernelSpec::linear(1)] {
            let g = gram(&spec, &x.view(), &x.view());
            let eigs = crate::linalg::symmetric_eigenvalues(&g.view());
            assert!(eigs[0] >= -1e-8, "smallest eigenvalue {}", eigs[0]);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(KernelSpec::gaussian(&[0], -1.0, 1.0).validate(3).is_err());
        assert!(KernelSpec::gaussian(&[0, 1, 2, 0], 1.0, 1.0).validate(4).is_err());
        assert!(KernelSpec::gaussian(&[5], 1.0, 1.0).validate(3).is_err());
        let mut bad = KernelSpec::linear(0);
        bad.reg_lambda = -0.5;
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn ic_residual_trace_obeys_tolerance() {
        let x = random_rows(120, 2, 5);
        let spec = KernelSpec::gaussian(&[0, 1], 0.7, 1.0);
        let tol = 1.0e-3;
        let basis = incomplete_cholesky(&spec, &x.view(), tol).unwrap();
        assert!(basis.residual_trace <= tol * 120.0, "residual {}", basis.residual_trace);
        // The factor reproduces the Gram matrix up to the same trace bound.
        let g = gram(&spec, &x.view(), &x.view());
        let approx = basis.l.dot(&basis.l.t());
        let trace_gap: f64 = (0..120).map(|i| g[[i, i]] - approx[[i, i]]).sum();
        assert!(trace_gap <= tol * 120.0 + 1e-9, "trace gap {trace_gap}");
        // Off-diagonal error of a partial Cholesky is controlled by the
        // residual diagonal; spot check it is small.
        let mut max_err = 0.0f64;
        for i in 0..120 {
            for j in 0..120 {
                max_err = max_err.max((g[[i, j]] - approx[[i, j]]).abs());
            }
        }
        assert!(max_err < 0.2, "entrywise error {max_err}");
    }

    #[test]
    fn ic_on_duplicated_rows_stops_at_true_rank() {
        // Five distinct points, each duplicated: Gram rank is 5 for a
        // gaussian kernel, so the factorization must stop there.
        let base = random_rows(5, 1, 3);
        let mut x = Array2::<f64>::zeros((10, 1));
        for i in 0..5 {
            x[[i, 0]] = base[[i, 0]];
            x[[i + 5, 0]] = base[[i, 0]];
        }
        let spec = KernelSpec::gaussian(&[0], 1.0, 1.0);
        let basis = incomplete_cholesky(&spec, &x.view(), 1.0e-10).unwrap();
        assert_eq!(basis.rank(), 5);
        let g = gram(&spec, &x.view(), &x.view());
        let approx = basis.l.dot(&basis.l.t());
        for (a, b) in g.iter().zip(approx.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn ic_is_deterministic() {
        let x = random_rows(60, 2, 21);
        let spec = KernelSpec::gaussian(&[0, 1], 1.1, 1.0);
        let a = incomplete_cholesky(&spec, &x.view(), 1e-3).unwrap();
        let b = incomplete_cholesky(&spec, &x.view(), 1e-3).unwrap();
        assert_eq!(a.pivots, b.pivots);
        assert_eq!(a.l.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.l.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ic_rejects_empty_input() {
        let x = Array2::<f64>::zeros((0, 1));
        let spec = KernelSpec::gaussian(&[0], 1.0, 1.0);
        assert!(matches!(incomplete_cholesky(&spec, &x.view(), 1e-3), Err(KernelError::EmptyRows)));
    }

    #[test]
    fn transfer_of_zero_coordinates_is_zero() {
        let x = random_rows(25, 1, 7);
        let spec = KernelSpec::gaussian(&[0], 1.0, 1.0);
        let basis = incomplete_cholesky(&spec, &x.view(), 1e-8).unwrap();
        let u = Array1::<f64>::zeros(basis.rank());
        let new_x = random_rows(6, 1, 8);
        let tr = transfer_coefficients(&spec, &x.view(), &basis, &u.view(), &new_x.view(), 1e-8, 1e-10)
            .unwrap();
        assert!(tr.values.iter().all(|v| v.abs() < 1e-12));
        assert!(tr.u_bar.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transfer_back_to_training_rows_reproduces_fit() {
        let x = random_rows(30, 1, 13);
        let spec = KernelSpec::gaussian(&[0], 0.9, 1.0);
        let basis = incomplete_cholesky(&spec, &x.view(), 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Array1::from_shape_fn(basis.rank(), |_| rng.random_range(-1.0..1.0));
        let fitted = basis.l.dot(&u);
        let tr = transfer_coefficients(&spec, &x.view(), &basis, &u.view(), &x.view(), 1e-12, 1e-10)
            .unwrap();
        // First half of the combined rows is the training block.
        for i in 0..30 {
            assert_abs_diff_eq!(tr.values[i], fitted[i], epsilon = 1e-8);
            assert_abs_diff_eq!(tr.values[i + 30], fitted[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn transfer_matches_dense_kernel_evaluation() {
        let x = random_rows(40, 2, 17);
        let new_x = random_rows(9, 2, 18);
        let spec = KernelSpec::gaussian(&[0, 1], 1.2, 1.0);
        let basis = incomplete_cholesky(&spec, &x.view(), 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Array1::from_shape_fn(basis.rank(), |_| rng.random_range(-1.0..1.0));
        let tr = transfer_coefficients(&spec, &x.view(), &basis, &u.view(), &new_x.view(), 1e-12, 1e-10)
            .unwrap();
        let dense = eval_dense(&spec, &x.view(), &tr.alpha.view(), &new_x.view());
        for i in 0..9 {
            assert_abs_diff_eq!(tr.values[40 + i], dense[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn transfer_flags_degenerate_basis() {
        // All rows identical: rank-1 basis, two requested coordinates can
        // never be matched.
        let x = Array2::<f64>::ones((10, 1));
        let spec = KernelSpec::gaussian(&[0], 1.0, 1.0);
        let basis = incomplete_cholesky(&spec, &x.view(), 1e-12).unwrap();
        assert_eq!(basis.rank(), 1);
        // Forge a two-column basis with a duplicated column to trigger the
        // pseudoinverse rank check.
        let mut l = Array2::<f64>::zeros((10, 2));
        l.column_mut(0).assign(&basis.l.column(0));
        l.column_mut(1).assign(&basis.l.column(0));
        let forged = LowRankBasis { l, pivots: vec![0, 0], residual_trace: 0.0, tol: 1e-12 };
        let u = array![1.0, 1.0];
        let err = transfer_coefficients(&spec, &x.view(), &forged, &u.view(), &x.view(), 1e-12, 1e-10);
        assert!(matches!(err, Err(KernelError::DegenerateBasis(_))));
    }
}
