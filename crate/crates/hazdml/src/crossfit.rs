//! Cross-fitted nuisance estimation.
//!
//! Subjects are split into `M >= 3` folds. For fold `m`, the *holdout*
//! is fold `m` itself, the *validation* set is fold `m + 1 (mod M)`, and
//! the *training* set is everything else. Each fold's model is fitted on
//! its training subjects only; holdout subjects contribute to estimating
//! equations using nuisances they never touched.
//!
//! Two nuisance routes are supported:
//!
//! * Hessian-projection weights `W = H_tf (H_ff + zeta I)^{-1}`, with
//!   `zeta` tuned by a cross-validated row-prediction error of the
//!   treatment-adjustment cross blocks;
//! * per-arm treatment density ratios `g_k`, fitted by penalized
//!   logistic regression with `zeta` tuned by either a cross-validated
//!   calibration error or logistic model evidence.
//!
//! All Hessian blocks entering the tuning and the weights are averages
//! per subject, which keeps `zeta` on a sample-size-free scale. Blocks
//! from different row sets are expressed in shared coordinates by
//! re-factorizing each kernel over the union of the rows and
//! transferring the fitted coordinates (see
//! [`crate::kernel::transfer_coefficients`]).

use crate::evidence::{laplace_log_bme, EvidenceError, FitOptions, FittedModel};
use crate::kernel::{incomplete_cholesky, transfer_coefficients, KernelError, KernelSpec, LowRankBasis};
use crate::likelihood::{
    add_ridge, logistic_hessian, logistic_value_grad, subject_range_hessian_marginal,
    subject_range_hessian_plain, Design, FitState, LikelihoodError, G_CLIP,
};
use crate::linalg::{logdet_spd, solve_spd_multi, LinalgError};
use crate::optim::{minimize, OptimError, OptimizerConfig};
use crate::panel::PanelDataset;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Relative rank tolerance for the least-norm transfer solve.
pub const PINV_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CrossfitError {
    #[error("cross-fitting needs at least 3 folds, got {0}")]
    TooFewFolds(usize),
    #[error("{n_subjects} subjects cannot fill {n_folds} folds")]
    EmptyFold { n_subjects: usize, n_folds: usize },
    #[error("model fit failed: {0}")]
    Evidence(#[from] EvidenceError),
    #[error("kernel failure: {0}")]
    Kernel(#[from] KernelError),
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
    #[error("optimization failed: {0}")]
    Optim(#[from] OptimError),
    #[error("design failure: {0}")]
    Likelihood(#[from] LikelihoodError),
    #[error("no rows on arm {0} in the training split")]
    NoArmRows(usize),
    #[error("no untreated rows in the training split")]
    NoUntreatedRows,
    #[error("hyperparameter grid is empty or produced no usable value")]
    EmptyGrid,
}

/// Deterministic fold assignment: a seeded shuffle dealt round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn new(n_subjects: usize, n_folds: usize, seed: u64) -> Result<FoldPlan, CrossfitError> {
        if n_folds < 3 {
            return Err(CrossfitError::TooFewFolds(n_folds));
        }
        if n_subjects < n_folds {
            return Err(CrossfitError::EmptyFold { n_subjects, n_folds });
        }
        let mut order: Vec<usize> = (0..n_subjects).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut folds = vec![Vec::new(); n_folds];
        for (i, s) in order.into_iter().enumerate() {
            folds[i % n_folds].push(s);
        }
        for f in &mut folds {
            f.sort_unstable();
        }
        Ok(FoldPlan { folds })
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// Subjects scored in fold `m`.
    pub fn holdout(&self, m: usize) -> &[usize] {
        &self.folds[m]
    }

    /// Subjects used for hyperparameter validation in fold `m`.
    pub fn val(&self, m: usize) -> &[usize] {
        &self.folds[(m + 1) % self.folds.len()]
    }

    /// Training subjects of fold `m`: everything outside holdout and
    /// validation.
    pub fn train(&self, m: usize) -> Vec<usize> {
        let skip_a = m;
        let skip_b = (m + 1) % self.folds.len();
        let mut out = Vec::new();
        for (j, f) in self.folds.iter().enumerate() {
            if j != skip_a && j != skip_b {
                out.extend_from_slice(f);
            }
        }
        out.sort_unstable();
        out
    }
}

/// One fold's training-split model.
#[derive(Debug)]
pub struct FoldModel {
    pub fold: usize,
    pub train_subjects: Vec<usize>,
    pub fit: FittedModel,
}

/// Fits the (fixed-hyperparameter) model independently on every fold's
/// training split. Folds run in parallel; results keep fold order.
pub fn fit_fold_models(
    dataset: &PanelDataset,
    kernels: &[KernelSpec],
    latent_prior: Option<&[usize]>,
    plan: &FoldPlan,
    opts: &FitOptions,
) -> Result<Vec<FoldModel>, CrossfitError> {
    (0..plan.n_folds())
        .into_par_iter()
        .map(|m| {
            let train = plan.train(m);
            let rows = dataset.flat_rows(&train);
            let fit = crate::evidence::fit_model(
                &rows,
                dataset.n_arms(),
                kernels,
                latent_prior,
                opts,
                None,
            )?;
            Ok(FoldModel { fold: m, train_subjects: train, fit })
        })
        .collect()
}

/// A fold model re-expressed over the union of two subject groups: the
/// model's training subjects (first block) and a second group.
#[derive(Debug)]
pub struct CombinedFit {
    pub design: Design,
    /// Packed parameters in the combined coordinates.
    pub x: Vec<f64>,
    /// Subjects in the first (training) block.
    pub n_first_subjects: usize,
    /// Rows in the first block.
    pub n_first_rows: usize,
}

/// Transfers a fold model onto `train + second` rows, producing a design
/// and parameter vector in the combined coordinates.
pub fn combined_fit(
    dataset: &PanelDataset,
    fm: &FoldModel,
    second: &[usize],
    ic_tol: f64,
) -> Result<CombinedFit, CrossfitError> {
    let mut idx = fm.train_subjects.clone();
    idx.extend_from_slice(second);
    let rows = dataset.flat_rows(&idx);
    let n_first_subjects = fm.train_subjects.len();
    let n_first_rows = if n_first_subjects == 0 {
        0
    } else {
        rows.subject_rows[n_first_subjects - 1].end
    };
    let train_x = rows.x.slice(ndarray::s![..n_first_rows, ..]);
    let new_x = rows.x.slice(ndarray::s![n_first_rows.., ..]);
    let mut bases: Vec<LowRankBasis> = Vec::with_capacity(fm.fit.kernels.len());
    let mut u_blocks: Vec<Vec<f64>> = Vec::with_capacity(fm.fit.kernels.len());
    for (k, spec) in fm.fit.kernels.iter().enumerate() {
        let u_hat = Array1::from_iter(fm.fit.state.u_blocks[k].iter().copied());
        let t = transfer_coefficients(
            spec,
            &train_x,
            &fm.fit.bases[k],
            &u_hat.view(),
            &new_x,
            ic_tol,
            PINV_TOL,
        )?;
        u_blocks.push(t.u_bar.to_vec());
        bases.push(t.combined);
    }
    let base_refs: Vec<&LowRankBasis> = bases.iter().collect();
    let design = Design::new(&rows, &base_refs, dataset.n_arms(), fm.fit.latent_prior.as_deref())?;
    let layout = design.layout();
    let state = FitState {
        theta: fm.fit.state.theta.clone(),
        u_blocks,
        bias: fm.fit.state.bias,
        latent: fm.fit.state.latent.clone(),
    };
    Ok(CombinedFit { x: state.pack(&layout), design, n_first_subjects, n_first_rows })
}

/// Per-subject-average Hessian cross blocks of one fold, in shared
/// train-plus-validation coordinates.
#[derive(Debug, Clone)]
pub struct FoldBlocks {
    pub h_tf_tr: Array2<f64>,
    pub h_ff_tr: Array2<f64>,
    pub h_tf_val: Array2<f64>,
    pub h_ff_val: Array2<f64>,
}

/// Computes [`FoldBlocks`] for one fold model.
pub fn fold_blocks(
    dataset: &PanelDataset,
    plan: &FoldPlan,
    fm: &FoldModel,
    ic_tol: f64,
) -> Result<FoldBlocks, CrossfitError> {
    let val = plan.val(fm.fold);
    let cf = combined_fit(dataset, fm, val, ic_tol)?;
    let n_tr = cf.n_first_subjects;
    let n_val = val.len();
    let latent = cf.design.latent.is_some();
    let range_blocks = |range: std::ops::Range<usize>| {
        if latent {
            subject_range_hessian_marginal(&cf.design, &cf.x, range)
        } else {
            subject_range_hessian_plain(&cf.design, &cf.x, range)
        }
    };
    let mut tr = range_blocks(0..n_tr);
    tr.scale(1.0 / n_tr as f64);
    let mut va = range_blocks(n_tr..n_tr + n_val);
    va.scale(1.0 / n_val as f64);
    Ok(FoldBlocks { h_tf_tr: tr.h_tf, h_ff_tr: tr.h_ff, h_tf_val: va.h_tf, h_ff_val: va.h_ff })
}

/// Projection weights `W = H_tf (H_ff + zeta I)^{-1}`.
pub fn w_matrix(
    h_tf: &ArrayView2<f64>,
    h_ff: &ArrayView2<f64>,
    zeta: f64,
) -> Result<Array2<f64>, LinalgError> {
    let mut a = h_ff.to_owned();
    for i in 0..a.nrows() {
        a[[i, i]] += zeta;
    }
    let rhs = h_tf.t().to_owned();
    let x = solve_spd_multi(&a.view(), &rhs.view())?;
    Ok(x.t().to_owned())
}

/// Cross-validation error of the Hessian projection at one `zeta`:
/// squared row-prediction error of the validation cross block from the
/// training blocks, summed over folds and arms.
pub fn cverr_h(blocks: &[FoldBlocks], zeta: f64) -> Result<f64, LinalgError> {
    let mut total = 0.0;
    for b in blocks {
        let mut a = b.h_ff_tr.clone();
        for i in 0..a.nrows() {
            a[[i, i]] += zeta;
        }
        let y = solve_spd_multi(&a.view(), &b.h_ff_val.view())?;
        let r = &b.h_tf_val - &b.h_tf_tr.dot(&y);
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// A tuning curve over `zeta` and its minimizer.
#[derive(Debug, Clone)]
pub struct ZetaCurve {
    /// `(zeta, value)` pairs; failed evaluations carry `NaN`.
    pub curve: Vec<(f64, f64)>,
    pub best_zeta: f64,
    pub best_value: f64,
}

/// Tunes the projection ridge by minimizing [`cverr_h`] over a grid.
pub fn tune_zeta_h(blocks: &[FoldBlocks], zetas: &[f64]) -> Result<ZetaCurve, CrossfitError> {
    let mut curve = Vec::with_capacity(zetas.len());
    let mut best: Option<(f64, f64)> = None;
    for &z in zetas {
        let v = match cverr_h(blocks, z) {
            Ok(v) => v,
            Err(_) => f64::NAN,
        };
        curve.push((z, v));
        if v.is_finite() && best.map_or(true, |(_, bv)| v < bv) {
            best = Some((z, v));
        }
    }
    let (best_zeta, best_value) = best.ok_or(CrossfitError::EmptyGrid)?;
    Ok(ZetaCurve { curve, best_zeta, best_value })
}

// ---------------------------------------------------------------------------
// Treatment density ratios g_k
// ---------------------------------------------------------------------------

/// A fitted density-ratio model for one arm.
#[derive(Debug, Clone)]
pub struct GFit {
    pub arm: usize,
    pub zeta: f64,
    pub kernels: Vec<KernelSpec>,
    pub bases: Vec<LowRankBasis>,
    /// Coordinates `[u_1 .. u_J | bias]`.
    pub coords: Vec<f64>,
    /// Penalized objective at the optimum.
    pub value: f64,
}

/// Fits the penalized logistic ratio model for one arm on the given
/// design rows. The data term carries the step width `dt`; the penalty is
/// `zeta` times the squared kernel norm (bias free).
pub fn fit_g(
    rows: &crate::panel::FlatRows,
    kernels: &[KernelSpec],
    arm: usize,
    dt: f64,
    zeta: f64,
    optim: &OptimizerConfig,
    ic_tol: f64,
) -> Result<GFit, CrossfitError> {
    let n_arm = rows.arm.iter().filter(|a| **a == Some(arm)).count();
    let n_none = rows.arm.iter().filter(|a| a.is_none()).count();
    if n_arm == 0 {
        return Err(CrossfitError::NoArmRows(arm));
    }
    if n_none == 0 {
        return Err(CrossfitError::NoUntreatedRows);
    }
    let bases: Vec<LowRankBasis> = kernels
        .iter()
        .map(|spec| incomplete_cholesky(spec, &rows.x.view(), ic_tol))
        .collect::<Result<_, _>>()?;
    let base_refs: Vec<&LowRankBasis> = bases.iter().collect();
    let design = Design::new(rows, &base_refs, 0, None)?;
    let layout = design.layout();
    let lambdas = vec![zeta; kernels.len()];
    let mut x0 = vec![0.0; design.p_basis()];
    x0[design.p_basis() - 1] = ((n_arm as f64 + 1.0) / (n_none as f64 + 1.0)).ln();
    let res = minimize(
        |x, grad| {
            let v = logistic_value_grad(&design, arm, dt, x, grad);
            v + add_ridge(&layout, &lambdas, x, grad, 2.0)
        },
        &x0,
        optim,
    )?;
    Ok(GFit { arm, zeta, kernels: kernels.to_vec(), bases, coords: res.x, value: res.value })
}

/// Laplace evidence of a fitted ratio model. The penalty `zeta |g|^2`
/// corresponds to a Gaussian prior of precision `2 zeta` on each kernel
/// block.
pub fn logistic_log_bme(
    rows: &crate::panel::FlatRows,
    gfit: &GFit,
    dt: f64,
) -> Result<f64, CrossfitError> {
    let base_refs: Vec<&LowRankBasis> = gfit.bases.iter().collect();
    let design = Design::new(rows, &base_refs, 0, None)?;
    let mut h = logistic_hessian(&design, gfit.arm, dt, &gfit.coords);
    let layout = design.layout();
    for k in 0..gfit.kernels.len() {
        for i in layout.u_range(k) {
            h[[i, i]] += 2.0 * gfit.zeta;
        }
    }
    let logdet = logdet_spd(&h.view()).map_err(CrossfitError::Linalg)?;
    let blocks: Vec<(f64, usize)> =
        design.ranks.iter().map(|r| (2.0 * gfit.zeta, *r)).collect();
    Ok(laplace_log_bme(gfit.value, &blocks, logdet))
}

/// Ratio values `g(x)` of a fitted model on the union of its training
/// rows and new rows, by kernel transfer. Returns values over all
/// combined rows (training block first).
pub fn g_values_on(
    gfit: &GFit,
    train_x: &ArrayView2<f64>,
    new_x: &ArrayView2<f64>,
    ic_tol: f64,
) -> Result<Array1<f64>, CrossfitError> {
    let mut values = Array1::<f64>::zeros(train_x.nrows() + new_x.nrows());
    let mut off = 0usize;
    for (k, spec) in gfit.kernels.iter().enumerate() {
        let rank = gfit.bases[k].rank();
        let u = Array1::from_iter(gfit.coords[off..off + rank].iter().copied());
        let t = transfer_coefficients(spec, train_x, &gfit.bases[k], &u.view(), new_x, ic_tol, PINV_TOL)?;
        values += &t.values;
        off += rank;
    }
    values += gfit.coords[gfit.coords.len() - 1];
    Ok(values)
}

/// Result of tuning the ratio penalty for one arm.
#[derive(Debug, Clone)]
pub struct GTuning {
    /// `(zeta, CVErr)`; failed evaluations carry `NaN`.
    pub cv_curve: Vec<(f64, f64)>,
    /// `(zeta, log evidence)` from full-data fits.
    pub bme_curve: Vec<(f64, f64)>,
    pub zeta_by_cv: f64,
    pub zeta_by_bme: f64,
    /// True when the evidence check prefers an intercept-only ratio
    /// model over the cross-validation winner, flagging a run whose
    /// calibration error may have been minimized by the trivial
    /// half-and-half solution.
    pub trivial_risk: bool,
    /// Ratio values clamped during cross-validation scoring.
    pub clipped: usize,
}

/// Calibration bracket of one fold on its validation rows: the fitted
/// ratio's person-time sum of `A_k (e^{-g} - 1) + (1 - sum A)(e^{g} - 1)`.
fn g_bracket(
    design_rows: (&[Option<usize>], usize),
    g_vals: &Array1<f64>,
    arm: usize,
    dt: f64,
    clipped: &mut usize,
) -> f64 {
    let (arms, offset) = design_rows;
    let mut s = 0.0;
    for (local, a) in arms.iter().enumerate() {
        let mut g = g_vals[offset + local];
        if g.abs() > G_CLIP {
            *clipped += 1;
            g = g.clamp(-G_CLIP, G_CLIP);
        }
        match a {
            Some(k) if *k == arm => s += (-g).exp() - 1.0,
            Some(_) => {}
            None => s += g.exp() - 1.0,
        }
    }
    s * dt
}

/// Tunes `zeta` for one arm's ratio model by cross-validated calibration
/// error and by logistic evidence, reporting both curves.
pub fn tune_zeta_g(
    dataset: &PanelDataset,
    plan: &FoldPlan,
    kernels: &[KernelSpec],
    arm: usize,
    zetas: &[f64],
    optim: &OptimizerConfig,
    ic_tol: f64,
) -> Result<GTuning, CrossfitError> {
    if zetas.is_empty() {
        return Err(CrossfitError::EmptyGrid);
    }
    let dt = dataset.dt();
    let all_rows = dataset.flat_rows_all();
    let mut cv_curve = Vec::with_capacity(zetas.len());
    let mut bme_curve = Vec::with_capacity(zetas.len());
    let mut clipped_total = 0usize;
    let mut best_cv: Option<(f64, f64)> = None;
    let mut best_bme: Option<(f64, f64)> = None;
    let mut full_fit_at_cv_best: Option<GFit> = None;
    for &zeta in zetas {
        // Cross-validated calibration error.
        let folds: Result<Vec<(f64, usize)>, CrossfitError> = (0..plan.n_folds())
            .into_par_iter()
            .map(|m| {
                let train = plan.train(m);
                let val = plan.val(m);
                let mut idx = train.clone();
                idx.extend_from_slice(val);
                let rows = dataset.flat_rows(&idx);
                let n_tr_rows = rows.subject_rows[train.len() - 1].end;
                let train_rows = dataset.flat_rows(&train);
                let gfit = fit_g(&train_rows, kernels, arm, dt, zeta, optim, ic_tol)?;
                let train_x = rows.x.slice(ndarray::s![..n_tr_rows, ..]);
                let new_x = rows.x.slice(ndarray::s![n_tr_rows.., ..]);
                let vals = g_values_on(&gfit, &train_x, &new_x, ic_tol)?;
                let mut clipped = 0usize;
                let bracket = g_bracket(
                    (&rows.arm[n_tr_rows..], n_tr_rows),
                    &vals,
                    arm,
                    dt,
                    &mut clipped,
                );
                Ok((bracket * bracket, clipped))
            })
            .collect();
        let cv = match folds {
            Ok(parts) => {
                clipped_total += parts.iter().map(|(_, c)| c).sum::<usize>();
                parts.iter().map(|(b, _)| b).sum::<f64>()
            }
            Err(CrossfitError::NoArmRows(a)) => return Err(CrossfitError::NoArmRows(a)),
            Err(CrossfitError::NoUntreatedRows) => return Err(CrossfitError::NoUntreatedRows),
            Err(_) => f64::NAN,
        };
        cv_curve.push((zeta, cv));
        // Full-data evidence.
        let bme = match fit_g(&all_rows, kernels, arm, dt, zeta, optim, ic_tol) {
            Ok(gfit) => match logistic_log_bme(&all_rows, &gfit, dt) {
                Ok(b) => {
                    if cv.is_finite() && best_cv.map_or(true, |(_, bv)| cv < bv) {
                        full_fit_at_cv_best = Some(gfit);
                    }
                    b
                }
                Err(_) => f64::NAN,
            },
            Err(_) => f64::NAN,
        };
        bme_curve.push((zeta, bme));
        if cv.is_finite() && best_cv.map_or(true, |(_, bv)| cv < bv) {
            best_cv = Some((zeta, cv));
        }
        if bme.is_finite() && best_bme.map_or(true, |(_, bv)| bme > bv) {
            best_bme = Some((zeta, bme));
        }
    }
    let (zeta_by_cv, _) = best_cv.ok_or(CrossfitError::EmptyGrid)?;
    let (zeta_by_bme, _) = best_bme.ok_or(CrossfitError::EmptyGrid)?;
    // Trivial-solution guard: evidence comparison against an
    // intercept-only ratio model.
    let trivial_risk = match full_fit_at_cv_best {
        Some(gfit) => {
            let full_bme = logistic_log_bme(&all_rows, &gfit, dt)?;
            let bias_fit = fit_g(&all_rows, &[], arm, dt, 1.0, optim, ic_tol)?;
            let bias_bme = logistic_log_bme(&all_rows, &bias_fit, dt)?;
            full_bme <= bias_bme
        }
        None => true,
    };
    Ok(GTuning {
        cv_curve,
        bme_curve,
        zeta_by_cv,
        zeta_by_bme,
        trivial_risk,
        clipped: clipped_total,
    })
}

// ---------------------------------------------------------------------------
// Per-fold artifacts for the estimating equations
// ---------------------------------------------------------------------------

/// Everything the debiasing stage needs from one fold, expressed over the
/// union of training and holdout rows (training block first).
#[derive(Debug)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub n_train_subjects: usize,
    /// Global dataset indices of the holdout subjects, in design order.
    pub holdout_subjects: Vec<usize>,
    pub theta_hat: Vec<f64>,
    pub design: Design,
    /// Packed fold-model parameters in the combined coordinates.
    pub x: Vec<f64>,
    /// Projection weights at `zeta_h` from training-block averages, when
    /// the Hessian route is active.
    pub w: Option<Array2<f64>>,
    pub zeta_h: Option<f64>,
    /// Posterior frailty weights at the fold parameters, all combined
    /// subjects (latent models only).
    pub responsibilities: Option<Vec<[f64; 2]>>,
    /// Ratio values per arm over all combined rows, when the ratio route
    /// is active.
    pub g_values: Option<Vec<Array1<f64>>>,
}

/// Assembles per-fold artifacts. `zeta_h` activates the Hessian route;
/// `g_fits` (indexed `[fold][arm]`, trained on each fold's training
/// split) activates the ratio route.
pub fn build_fold_artifacts(
    dataset: &PanelDataset,
    plan: &FoldPlan,
    fold_models: &[FoldModel],
    zeta_h: Option<f64>,
    g_fits: Option<&[Vec<GFit>]>,
    ic_tol: f64,
) -> Result<Vec<FoldArtifacts>, CrossfitError> {
    fold_models
        .par_iter()
        .map(|fm| {
            let holdout = plan.holdout(fm.fold).to_vec();
            let cf = combined_fit(dataset, fm, &holdout, ic_tol)?;
            let n_tr = cf.n_first_subjects;
            let latent = cf.design.latent.is_some();
            let w = match zeta_h {
                None => None,
                Some(z) => {
                    let mut tr = if latent {
                        subject_range_hessian_marginal(&cf.design, &cf.x, 0..n_tr)
                    } else {
                        subject_range_hessian_plain(&cf.design, &cf.x, 0..n_tr)
                    };
                    tr.scale(1.0 / n_tr as f64);
                    Some(w_matrix(&tr.h_tf.view(), &tr.h_ff.view(), z)?)
                }
            };
            let responsibilities = latent
                .then(|| crate::likelihood::responsibilities(&cf.design, &cf.x));
            let g_values = match g_fits {
                None => None,
                Some(fits) => {
                    let rows_x = {
                        let mut idx = fm.train_subjects.clone();
                        idx.extend_from_slice(&holdout);
                        dataset.flat_rows(&idx).x
                    };
                    let train_x = rows_x.slice(ndarray::s![..cf.n_first_rows, ..]).to_owned();
                    let new_x = rows_x.slice(ndarray::s![cf.n_first_rows.., ..]).to_owned();
                    let mut per_arm = Vec::with_capacity(fits[fm.fold].len());
                    for gfit in &fits[fm.fold] {
                        per_arm.push(g_values_on(gfit, &train_x.view(), &new_x.view(), ic_tol)?);
                    }
                    Some(per_arm)
                }
            };
            Ok(FoldArtifacts {
                fold: fm.fold,
                n_train_subjects: n_tr,
                holdout_subjects: holdout,
                theta_hat: fm.fit.state.theta.clone(),
                design: cf.design,
                x: cf.x,
                w,
                zeta_h,
                responsibilities,
                g_values,
            })
        })
        .collect()
}

/// Fits ratio models for every fold and arm at the given `zeta` per arm.
pub fn fit_g_per_fold(
    dataset: &PanelDataset,
    plan: &FoldPlan,
    kernels: &[KernelSpec],
    zetas_by_arm: &[f64],
    optim: &OptimizerConfig,
    ic_tol: f64,
) -> Result<Vec<Vec<GFit>>, CrossfitError> {
    (0..plan.n_folds())
        .into_par_iter()
        .map(|m| {
            let train = plan.train(m);
            let rows = dataset.flat_rows(&train);
            zetas_by_arm
                .iter()
                .enumerate()
                .map(|(arm, &zeta)| fit_g(&rows, kernels, arm, dataset.dt(), zeta, optim, ic_tol))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::FitOptions;
    use crate::likelihood::tests::random_panel;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn fold_plan_rejects_fewer_than_three_folds() {
        assert!(matches!(FoldPlan::new(20, 2, 1), Err(CrossfitError::TooFewFolds(2))));
    }

    #[test]
    fn fold_plan_rejects_more_folds_than_subjects() {
        assert!(matches!(
            FoldPlan::new(3, 5, 1),
            Err(CrossfitError::EmptyFold { n_subjects: 3, n_folds: 5 })
        ));
    }

    #[test]
    fn fold_plan_is_deterministic_in_seed() {
        let a = FoldPlan::new(23, 5, 7).unwrap();
        let b = FoldPlan::new(23, 5, 7).unwrap();
        assert_eq!(a, b);
        let c = FoldPlan::new(23, 5, 8).unwrap();
        assert_ne!(a, c);
    }

    proptest! {
        /// Folds partition the subjects with near-equal sizes, and the
        /// three roles of every fold index are disjoint and exhaustive.
        #[test]
        fn fold_plan_partitions_subjects(n in 5usize..120, m in 3usize..6, seed in 0u64..500) {
            prop_assume!(n >= m);
            let plan = FoldPlan::new(n, m, seed).unwrap();
            let mut seen = vec![false; n];
            for f in 0..plan.n_folds() {
                for &s in plan.holdout(f) {
                    prop_assert!(!seen[s], "subject {s} in two folds");
                    seen[s] = true;
                }
            }
            prop_assert!(seen.iter().all(|v| *v));
            let sizes: Vec<usize> = (0..m).map(|f| plan.holdout(f).len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for f in 0..m {
                let mut all = plan.train(f);
                all.extend_from_slice(plan.holdout(f));
                all.extend_from_slice(plan.val(f));
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn w_matrix_reduces_to_cross_block_for_identity_curvature() {
        let h_tf = array![[1.0, 2.0, 3.0], [0.5, -1.0, 0.25]];
        let h_ff = Array2::eye(3);
        let w = w_matrix(&h_tf.view(), &h_ff.view(), 0.0).unwrap();
        for (a, b) in w.iter().zip(h_tf.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // With zeta = 1 the identity curvature halves the weights.
        let w = w_matrix(&h_tf.view(), &h_ff.view(), 1.0).unwrap();
        for (a, b) in w.iter().zip(h_tf.iter()) {
            assert_abs_diff_eq!(a, &(b / 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn cverr_vanishes_when_folds_agree_and_ridge_is_off() {
        let h_tf = array![[0.3, -0.2], [0.1, 0.5]];
        let h_ff = array![[2.0, 0.3], [0.3, 1.5]];
        let b = FoldBlocks {
            h_tf_tr: h_tf.clone(),
            h_ff_tr: h_ff.clone(),
            h_tf_val: h_tf.clone(),
            h_ff_val: h_ff.clone(),
        };
        let blocks = vec![b];
        assert_abs_diff_eq!(cverr_h(&blocks, 0.0).unwrap(), 0.0, epsilon = 1e-20);
        assert!(cverr_h(&blocks, 0.5).unwrap() > 1e-6);
    }

    #[test]
    fn tune_zeta_h_picks_curve_minimum() {
        let h_tf = array![[0.3, -0.2], [0.1, 0.5]];
        let h_ff = array![[2.0, 0.3], [0.3, 1.5]];
        let blocks = vec![FoldBlocks {
            h_tf_tr: h_tf.clone(),
            h_ff_tr: h_ff.clone(),
            h_tf_val: h_tf,
            h_ff_val: h_ff,
        }];
        let out = tune_zeta_h(&blocks, &[1.0, 0.1, 0.01]).unwrap();
        assert_abs_diff_eq!(out.best_zeta, 0.01, epsilon = 1e-15);
        assert_eq!(out.curve.len(), 3);
        let min = out.curve.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(out.best_value, min, epsilon = 1e-15);
    }

    #[test]
    fn intercept_only_ratio_fit_matches_empirical_logit() {
        let ds = random_panel(401, 12);
        let rows = ds.flat_rows_all();
        let optim = OptimizerConfig { eps_stop: 1e-10, ..OptimizerConfig::default() };
        let fit = fit_g(&rows, &[], 0, ds.dt(), 1.0, &optim, 1e-3).unwrap();
        let n1 = rows.arm.iter().filter(|a| **a == Some(0)).count() as f64;
        let n0 = rows.arm.iter().filter(|a| a.is_none()).count() as f64;
        assert_abs_diff_eq!(fit.coords[0], (n1 / n0).ln(), epsilon = 1e-6);
    }

    #[test]
    fn ratio_fit_requires_both_classes() {
        let ds = random_panel(409, 6);
        let mut subjects = ds.subjects().to_vec();
        for s in &mut subjects {
            s.arm.iter_mut().for_each(|a| *a = Some(1));
        }
        let all_treated =
            PanelDataset::new(subjects, ds.dt(), 2, ds.n_covariates(), None).unwrap();
        let rows = all_treated.flat_rows_all();
        let optim = OptimizerConfig::default();
        assert!(matches!(
            fit_g(&rows, &[], 0, ds.dt(), 1.0, &optim, 1e-3),
            Err(CrossfitError::NoArmRows(0))
        ));
        assert!(matches!(
            fit_g(&rows, &[], 1, ds.dt(), 1.0, &optim, 1e-3),
            Err(CrossfitError::NoUntreatedRows)
        ));
    }

    #[test]
    fn fold_blocks_have_consistent_shapes_and_transfer_is_faithful() {
        let ds = random_panel(419, 24).normalize().unwrap();
        let plan = FoldPlan::new(ds.n_subjects(), 4, 11).unwrap();
        let kernels = vec![KernelSpec::gaussian(&[0], 1.0, 0.5), KernelSpec::linear(1)];
        // Tight factorization everywhere so the transferred values are
        // exact reproductions rather than low-rank approximations.
        let opts = FitOptions { ic_tol: 1e-10, ..FitOptions::default() };
        let models = fit_fold_models(&ds, &kernels, None, &plan, &opts).unwrap();
        let blocks = fold_blocks(&ds, &plan, &models[0], 1e-10).unwrap();
        let p = blocks.h_ff_tr.nrows();
        assert_eq!(blocks.h_ff_val.nrows(), p);
        assert_eq!(blocks.h_tf_tr.ncols(), p);
        assert_eq!(blocks.h_tf_tr.nrows(), 2);
        // The training-block f values in combined coordinates must match
        // the original fit's values at a tight factorization tolerance.
        let fm = &models[0];
        let cf = combined_fit(&ds, fm, plan.val(0), 1e-10).unwrap();
        let layout_c = cf.design.layout();
        let rows_tr = ds.flat_rows(&fm.train_subjects);
        let base_refs: Vec<&LowRankBasis> = fm.fit.bases.iter().collect();
        let design_tr = Design::new(&rows_tr, &base_refs, ds.n_arms(), None).unwrap();
        let layout_t = design_tr.layout();
        let x_tr = fm.fit.state.pack(&layout_t);
        let eta_tr = crate::likelihood::linear_predictors(&design_tr, &x_tr);
        let eta_c = crate::likelihood::linear_predictors(&cf.design, &cf.x);
        let _ = layout_c;
        for r in 0..cf.n_first_rows {
            assert_abs_diff_eq!(eta_c[r], eta_tr[r], epsilon = 1e-8);
        }
    }

    #[test]
    fn artifacts_carry_route_specific_pieces() {
        let ds = random_panel(431, 20).normalize().unwrap();
        let plan = FoldPlan::new(ds.n_subjects(), 4, 3).unwrap();
        let kernels = vec![KernelSpec::gaussian(&[0], 1.0, 1.0)];
        let models = fit_fold_models(&ds, &kernels, None, &plan, &FitOptions::default()).unwrap();
        let g_fits = fit_g_per_fold(
            &ds,
            &plan,
            &[KernelSpec::gaussian(&[0], 1.0, 0.0)],
            &[1.0, 1.0],
            &OptimizerConfig::default(),
            1e-3,
        )
        .unwrap();
        let arts =
            build_fold_artifacts(&ds, &plan, &models, Some(0.5), Some(&g_fits), 1e-3).unwrap();
        assert_eq!(arts.len(), 4);
        for (m, a) in arts.iter().enumerate() {
            assert_eq!(a.fold, m);
            assert_eq!(a.holdout_subjects, plan.holdout(m));
            let w = a.w.as_ref().unwrap();
            assert_eq!(w.nrows(), 2);
            assert_eq!(w.ncols(), a.design.p_f());
            assert!(a.responsibilities.is_none());
            let g = a.g_values.as_ref().unwrap();
            assert_eq!(g.len(), 2);
            assert_eq!(g[0].len(), a.design.n_rows());
        }
    }

    #[test]
    fn zeta_g_tuning_flags_covariate_free_assignment() {
        // Treatment assignment ignores covariates: evidence should prefer
        // the intercept-only ratio model, raising the trivial-risk flag.
        let ds = random_panel(443, 30).normalize().unwrap();
        let plan = FoldPlan::new(ds.n_subjects(), 3, 5).unwrap();
        let kernels = vec![KernelSpec::gaussian(&[0], 1.0, 0.0)];
        let tune = tune_zeta_g(
            &ds,
            &plan,
            &kernels,
            0,
            &[10.0, 1.0],
            &OptimizerConfig::default(),
            1e-3,
        )
        .unwrap();
        assert_eq!(tune.cv_curve.len(), 2);
        assert_eq!(tune.bme_curve.len(), 2);
        assert!(tune.trivial_risk, "{:?}", tune);
    }
}
