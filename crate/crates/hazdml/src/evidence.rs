//! Model building: penalized fits, Laplace model evidence, hyperparameter
//! grid search, and the time-homogeneity audit.
//!
//! A model is a set of kernel components over covariate columns plus an
//! optional latent-frailty block. Gaussian components of the same input
//! dimension share one `(lambda, sigma)` pair, searched over a
//! multiplicative grid with spacing of roughly `ln(1.5)`. Linear
//! components carry a flat prior (`lambda = 0`).
//!
//! Evidence is a Laplace approximation around the penalized optimum:
//!
//! ```text
//! ln BME = -(objective at optimum)
//!          + sum over penalized blocks of dim(u_k)/2 * ln(lambda_k)
//!          - ln|H~| / 2
//! ```
//!
//! where `H~` is the Hessian of the penalized objective over all
//! coordinates. Blocks with `lambda = 0` contribute no prior term, which
//! keeps comparisons meaningful between models sharing their unpenalized
//! blocks. The audit refits a model with an extra Gaussian component on
//! elapsed follow-up time and flags the assumption as violated when the
//! augmented evidence exceeds the base evidence.

use crate::em::{em_fit_multistart, EmConfig, EmError};
use crate::kernel::{incomplete_cholesky, KernelError, KernelKind, KernelSpec, LowRankBasis};
use crate::likelihood::{
    add_ridge, hessian_marginal, hessian_plain, plain_nll, plain_value_grad,
    Design, FitState, LikelihoodError, Normalize,
};
use crate::linalg::{logdet_spd, LinalgError};
use crate::optim::{minimize, OptimError, OptimizerConfig};
use crate::panel::{FlatRows, PanelDataset};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("training data contains no events")]
    NoEvents,
    #[error("optimization failed: {0}")]
    Optim(#[from] OptimError),
    #[error("EM failed: {0}")]
    Em(#[from] EmError),
    #[error("kernel failure: {0}")]
    Kernel(#[from] KernelError),
    #[error("design failure: {0}")]
    Likelihood(#[from] LikelihoodError),
    #[error("panel failure: {0}")]
    Panel(#[from] crate::panel::PanelError),
    #[error("evidence Hessian is not positive definite: {0}")]
    HessianNotPd(#[source] LinalgError),
    #[error("no grid point produced a usable fit")]
    AllPointsFailed,
    #[error("latent anchor has {got} prior coefficients, design needs {want}")]
    AnchorShape { got: usize, want: usize },
}

/// Multiplicative grid with mantissas `{1, 1.5, 2, 3, 5, 7}` per decade —
/// spacing of roughly `ln(1.5)` on the log scale — clipped to `[lo, hi]`.
pub fn grid_ln15(lo: f64, hi: f64) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo, "grid bounds must be positive and ordered");
    const MANTISSAS: [f64; 6] = [1.0, 1.5, 2.0, 3.0, 5.0, 7.0];
    let mut out = Vec::new();
    let lo_dec = lo.log10().floor() as i32 - 1;
    let hi_dec = hi.log10().ceil() as i32;
    for dec in lo_dec..=hi_dec {
        for m in MANTISSAS {
            let v = m * 10f64.powi(dec);
            if v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12) {
                out.push(v);
            }
        }
    }
    out
}

/// One kernel component of a model, hyperparameters left open.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelTemplate {
    pub kind: KernelKind,
    pub covariate_indices: Vec<usize>,
}

impl KernelTemplate {
    pub fn linear(covariate: usize) -> Self {
        KernelTemplate { kind: KernelKind::Linear, covariate_indices: vec![covariate] }
    }

    pub fn gaussian(covariates: &[usize]) -> Self {
        KernelTemplate { kind: KernelKind::Gaussian, covariate_indices: covariates.to_vec() }
    }
}

/// A model shape: kernel components plus an optional latent block whose
/// prior uses the given baseline covariate columns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelTemplate {
    pub kernels: Vec<KernelTemplate>,
    pub latent_prior: Option<Vec<usize>>,
}

/// Hyperparameter values `(lambda, sigma)` for one Gaussian dimension
/// group.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct HyperPoint {
    pub lambda: f64,
    pub sigma: f64,
}

/// Grid of candidate values for one Gaussian dimension group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HyperGrid {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Hyperparameter assignment per Gaussian input dimension.
pub type HyperAssignment = BTreeMap<usize, HyperPoint>;

/// Gaussian input dimensions present in a template, ascending.
pub fn gaussian_dims(template: &ModelTemplate) -> Vec<usize> {
    let mut dims: Vec<usize> = template
        .kernels
        .iter()
        .filter(|k| k.kind == KernelKind::Gaussian)
        .map(|k| k.covariate_indices.len())
        .collect();
    dims.sort_unstable();
    dims.dedup();
    dims
}

/// Fills in a template's hyperparameters. Linear components get a flat
/// prior; Gaussian components of dimension `d` take `assignment[d]`.
pub fn instantiate(
    template: &ModelTemplate,
    assignment: &HyperAssignment,
) -> Result<Vec<KernelSpec>, EvidenceError> {
    template
        .kernels
        .iter()
        .map(|k| match k.kind {
            KernelKind::Linear => Ok(KernelSpec::linear(k.covariate_indices[0])),
            KernelKind::Gaussian => {
                let d = k.covariate_indices.len();
                let hp = assignment.get(&d).ok_or_else(|| {
                    EvidenceError::Kernel(KernelError::InvalidSpec(format!(
                        "no hyperparameters assigned for {d}-dimensional Gaussian kernels"
                    )))
                })?;
                Ok(KernelSpec::gaussian(&k.covariate_indices, hp.sigma, hp.lambda))
            }
        })
        .collect()
}

/// Starting-point policy for latent fits.
#[derive(Debug, Clone)]
pub enum LatentInit {
    /// Single start at the given frailty parameters (adjustment block
    /// starts at the plain initialization).
    Anchored { kappa: f64, beta: Vec<f64> },
    /// Seeded random restarts around the plain initialization.
    Random { n_starts: usize, seed: u64 },
}

/// Fit-time settings shared by every model fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub optim: OptimizerConfig,
    pub em: EmConfig,
    /// Low-rank factorization tolerance (residual trace per row).
    pub ic_tol: f64,
    pub latent_init: LatentInit,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optim: OptimizerConfig::default(),
            em: EmConfig::default(),
            ic_tol: 1e-3,
            latent_init: LatentInit::Random { n_starts: 5, seed: 17 },
        }
    }
}

/// A fitted model with everything needed for evidence, transfer, and
/// downstream nuisance work.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub kernels: Vec<KernelSpec>,
    pub latent_prior: Option<Vec<usize>>,
    pub bases: Vec<LowRankBasis>,
    pub state: FitState,
    /// Penalized objective at the optimum.
    pub value: f64,
    /// Unpenalized data term at the optimum (marginal when latent).
    pub nll: f64,
    pub log_bme: f64,
    pub clipped_rows: usize,
    pub converged: bool,
}

impl FittedModel {
    pub fn lambdas(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.reg_lambda).collect()
    }
}

/// Laplace log-evidence from its three ingredients. `penalized_blocks`
/// holds `(lambda, dim)` per coordinate block with a proper prior.
pub fn laplace_log_bme(obj_at_opt: f64, penalized_blocks: &[(f64, usize)], logdet_h_tilde: f64) -> f64 {
    let prior: f64 = penalized_blocks
        .iter()
        .filter(|(lam, _)| *lam > 0.0)
        .map(|(lam, dim)| 0.5 * *dim as f64 * lam.ln())
        .sum();
    -obj_at_opt + prior - 0.5 * logdet_h_tilde
}

/// Penalized-objective Hessian `H~` over all coordinates at `x`.
pub fn evidence_hessian(design: &Design, kernels: &[KernelSpec], x: &[f64]) -> Array2<f64> {
    let layout = design.layout();
    let blocks = if design.latent.is_some() {
        hessian_marginal(design, x, Normalize::Sum)
    } else {
        hessian_plain(design, x, Normalize::Sum)
    };
    let mut h = blocks.full();
    for (k, spec) in kernels.iter().enumerate() {
        if spec.reg_lambda > 0.0 {
            for i in layout.u_range(k) {
                h[[i, i]] += spec.reg_lambda;
            }
        }
    }
    h
}

fn log_bme_of(design: &Design, kernels: &[KernelSpec], x: &[f64], value: f64) -> Result<f64, EvidenceError> {
    let layout = design.layout();
    let h = evidence_hessian(design, kernels, x);
    let logdet = logdet_spd(&h.view()).map_err(EvidenceError::HessianNotPd)?;
    let blocks: Vec<(f64, usize)> =
        kernels.iter().enumerate().map(|(k, s)| (s.reg_lambda, layout.ranks[k])).collect();
    Ok(laplace_log_bme(value, &blocks, logdet))
}

/// Fits one fully specified model on flattened rows.
///
/// `warm` seeds the optimizer with a previous state; kernel-block
/// coordinates carry over only when the basis ranks match.
pub fn fit_model(
    rows: &FlatRows,
    n_arms: usize,
    kernels: &[KernelSpec],
    latent_prior: Option<&[usize]>,
    opts: &FitOptions,
    warm: Option<&FitState>,
) -> Result<FittedModel, EvidenceError> {
    let n_events = rows.event.iter().filter(|e| **e).count();
    if n_events == 0 {
        return Err(EvidenceError::NoEvents);
    }
    let bases: Vec<LowRankBasis> = kernels
        .iter()
        .map(|spec| incomplete_cholesky(spec, &rows.x.view(), opts.ic_tol))
        .collect::<Result<_, _>>()?;
    let base_refs: Vec<&LowRankBasis> = bases.iter().collect();
    let design = Design::new(rows, &base_refs, n_arms, latent_prior)?;
    let layout = design.layout();
    let lambdas: Vec<f64> = kernels.iter().map(|k| k.reg_lambda).collect();

    // Initial point: zero theta and kernel blocks, bias at the marginal
    // event rate per row; warm state overrides whatever is compatible.
    let mut x0 = vec![0.0; layout.len()];
    x0[layout.bias_index()] = (n_events as f64 / rows.x.nrows() as f64).ln();
    if let Some(w) = warm {
        x0[..layout.n_arms.min(w.theta.len())]
            .copy_from_slice(&w.theta[..layout.n_arms.min(w.theta.len())]);
        x0[layout.bias_index()] = w.bias;
        let ranks_match = w.u_blocks.len() == layout.ranks.len()
            && w.u_blocks.iter().zip(&layout.ranks).all(|(u, r)| u.len() == *r);
        if ranks_match {
            for (k, u) in w.u_blocks.iter().enumerate() {
                x0[layout.u_range(k)].copy_from_slice(u);
            }
        }
        if let (Some(l), Some(idx)) = (&w.latent, layout.kappa_index()) {
            x0[idx] = l.kappa;
            if let Some(range) = layout.beta_range() {
                if l.beta.len() == range.len() {
                    x0[range].copy_from_slice(&l.beta);
                }
            }
        }
    }

    let (x_hat, value, nll, converged, resp) = if design.latent.is_some() {
        let starts = match &opts.latent_init {
            LatentInit::Anchored { kappa, beta } => {
                let range = layout.beta_range().expect("latent layout");
                if beta.len() != range.len() {
                    return Err(EvidenceError::AnchorShape { got: beta.len(), want: range.len() });
                }
                let mut s = x0.clone();
                s[layout.kappa_index().unwrap()] = *kappa;
                s[range].copy_from_slice(beta);
                vec![s]
            }
            LatentInit::Random { n_starts, seed } => {
                crate::em::random_latent_starts(&layout, &x0, *n_starts, *seed)
            }
        };
        let fit = em_fit_multistart(&design, &lambdas, &starts, &opts.em)?;
        (fit.x.clone(), fit.objective, fit.marginal_nll, fit.converged, Some(fit.responsibilities))
    } else {
        let res = minimize(
            |x, grad| {
                let (v, _) = plain_value_grad(&design, x, grad);
                v + add_ridge(&layout, &lambdas, x, grad, 1.0)
            },
            &x0,
            &opts.optim,
        )?;
        let (nll, _) = plain_nll(&design, &res.x);
        (res.x.clone(), res.value, nll, res.converged, None)
    };

    let log_bme = log_bme_of(&design, kernels, &x_hat, value)?;
    let clipped = if design.latent.is_some() {
        // Clip counting for latent fits covers the larger branch shift.
        let (_, stats) = plain_nll(&design, &x_hat);
        stats.clipped_rows
    } else {
        plain_nll(&design, &x_hat).1.clipped_rows
    };
    let mut state = FitState::unpack(&x_hat, &layout);
    if let (Some(l), Some(r)) = (&mut state.latent, resp) {
        l.responsibilities = r;
    }
    Ok(FittedModel {
        kernels: kernels.to_vec(),
        latent_prior: latent_prior.map(|s| s.to_vec()),
        bases,
        state,
        value,
        nll,
        log_bme,
        clipped_rows: clipped,
        converged,
    })
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub assignment: HyperAssignment,
    /// `NaN` when the fit or its evidence failed at this point.
    pub log_bme: f64,
    pub value: f64,
    pub converged: bool,
}

/// Grid-search outcome: the best fitted model and the full trace.
#[derive(Debug)]
pub struct GridSearchOutcome {
    pub best: FittedModel,
    pub best_assignment: HyperAssignment,
    pub trace: Vec<GridPoint>,
}

fn cartesian(grids: &BTreeMap<usize, HyperGrid>) -> Vec<HyperAssignment> {
    let mut points: Vec<HyperAssignment> = vec![BTreeMap::new()];
    for (&dim, grid) in grids {
        let mut next = Vec::with_capacity(points.len() * grid.lambdas.len() * grid.sigmas.len());
        for base in &points {
            for &lambda in &grid.lambdas {
                for &sigma in &grid.sigmas {
                    let mut a = base.clone();
                    a.insert(dim, HyperPoint { lambda, sigma });
                    next.push(a);
                }
            }
        }
        points = next;
    }
    points
}

/// Exhaustive evidence-driven hyperparameter search. Consecutive points
/// warm-start from the previous optimum (kernel coordinates carry over
/// whenever basis ranks survive the hyperparameter change).
pub fn grid_search(
    dataset: &PanelDataset,
    template: &ModelTemplate,
    grids: &BTreeMap<usize, HyperGrid>,
    opts: &FitOptions,
) -> Result<GridSearchOutcome, EvidenceError> {
    let rows = dataset.flat_rows_all();
    let mut trace = Vec::new();
    let mut best: Option<(FittedModel, HyperAssignment)> = None;
    let mut warm: Option<FitState> = None;
    for assignment in cartesian(grids) {
        let kernels = instantiate(template, &assignment)?;
        match fit_model(
            &rows,
            dataset.n_arms(),
            &kernels,
            template.latent_prior.as_deref(),
            opts,
            warm.as_ref(),
        ) {
            Ok(fit) => {
                warm = Some(fit.state.clone());
                trace.push(GridPoint {
                    assignment: assignment.clone(),
                    log_bme: fit.log_bme,
                    value: fit.value,
                    converged: fit.converged,
                });
                let better = match &best {
                    None => true,
                    Some((b, _)) => fit.log_bme > b.log_bme,
                };
                if better {
                    best = Some((fit, assignment));
                }
            }
            Err(EvidenceError::NoEvents) => return Err(EvidenceError::NoEvents),
            Err(_) => {
                trace.push(GridPoint {
                    assignment: assignment.clone(),
                    log_bme: f64::NAN,
                    value: f64::NAN,
                    converged: false,
                });
            }
        }
    }
    match best {
        Some((fit, assignment)) => {
            Ok(GridSearchOutcome { best: fit, best_assignment: assignment, trace })
        }
        None => Err(EvidenceError::AllPointsFailed),
    }
}

/// Time-homogeneity audit outcome.
#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub base_log_bme: f64,
    /// Best evidence over the audit grid for the augmented model.
    pub augmented_log_bme: f64,
    /// True when the augmented model's evidence exceeds the base model's.
    pub violated: bool,
    pub trace: Vec<GridPoint>,
}

/// Audits time homogeneity: refits the base model with an extra
/// one-dimensional Gaussian component on elapsed follow-up time, keeping
/// the base hyperparameters fixed and maximizing evidence over the audit
/// component's `(lambda, sigma)` grid.
pub fn time_homogeneity_audit(
    dataset: &PanelDataset,
    base: &FittedModel,
    n_arms: usize,
    audit_grid: &HyperGrid,
    opts: &FitOptions,
) -> Result<AuditOutcome, EvidenceError> {
    let augmented = dataset.with_elapsed_time_covariate()?;
    let rows = augmented.flat_rows_all();
    let time_col = augmented.n_covariates() - 1;
    let mut trace = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut warm = Some(base.state.clone());
    for &lambda in &audit_grid.lambdas {
        for &sigma in &audit_grid.sigmas {
            let mut kernels = base.kernels.clone();
            kernels.push(KernelSpec::gaussian(&[time_col], sigma, lambda));
            let mut assignment = BTreeMap::new();
            assignment.insert(1usize, HyperPoint { lambda, sigma });
            match fit_model(&rows, n_arms, &kernels, base.latent_prior.as_deref(), opts, warm.as_ref()) {
                Ok(fit) => {
                    if fit.log_bme > best {
                        best = fit.log_bme;
                    }
                    warm = Some(fit.state.clone());
                    trace.push(GridPoint {
                        assignment,
                        log_bme: fit.log_bme,
                        value: fit.value,
                        converged: fit.converged,
                    });
                }
                Err(EvidenceError::NoEvents) => return Err(EvidenceError::NoEvents),
                Err(_) => {
                    trace.push(GridPoint {
                        assignment,
                        log_bme: f64::NAN,
                        value: f64::NAN,
                        converged: false,
                    });
                }
            }
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(EvidenceError::AllPointsFailed);
    }
    Ok(AuditOutcome {
        base_log_bme: base.log_bme,
        augmented_log_bme: best,
        violated: best > base.log_bme,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::tests::random_panel;
    use crate::panel::{PanelDataset, SubjectPanel};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn ln15_grid_matches_published_spacing() {
        let g = grid_ln15(2.0, 10.0);
        assert_eq!(g.len(), 5);
        for (got, want) in g.iter().zip([2.0, 3.0, 5.0, 7.0, 10.0]) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
    }

    #[test]
    fn ln15_grid_spans_decades() {
        let g = grid_ln15(0.5, 20.0);
        for (got, want) in g.iter().zip([0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0])
        {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-9);
        }
    }

    /// The evidence formula is exact for a quadratic objective with one
    /// penalized coordinate, so it must match brute-force integration of
    /// the posterior mass.
    #[test]
    fn evidence_matches_quadrature_on_quadratic_model() {
        let a = 3.7; // data curvature
        let c = 1.3; // data optimum
        let lambda = 0.9;
        let u_hat = a * c / (a + lambda);
        let obj = |u: f64| 0.5 * a * (u - c) * (u - c) + 0.5 * lambda * u * u;
        let approx_bme = laplace_log_bme(obj(u_hat), &[(lambda, 1)], (a + lambda).ln());
        // Simpson integration of (lambda/2pi)^(1/2) exp(-obj(u)).
        let (lo, hi, n) = (-30.0f64, 30.0f64, 60_001usize);
        let h = (hi - lo) / (n - 1) as f64;
        let integrand = |u: f64| (lambda / (2.0 * std::f64::consts::PI)).sqrt() * (-obj(u)).exp();
        let mut s = integrand(lo) + integrand(hi);
        for i in 1..n - 1 {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * integrand(lo + i as f64 * h);
        }
        let exact = (s * h / 3.0).ln();
        assert_abs_diff_eq!(approx_bme, exact, epsilon = 1e-8);
    }

    #[test]
    fn flat_prior_blocks_carry_no_prior_term() {
        let base = laplace_log_bme(2.0, &[(0.0, 3)], 1.0);
        assert_abs_diff_eq!(base, -2.0 - 0.5, epsilon = 1e-12);
        let with = laplace_log_bme(2.0, &[(0.0, 3), (2.0, 2)], 1.0);
        assert_abs_diff_eq!(with, -2.0 - 0.5 + 2.0f64.ln(), epsilon = 1e-12);
    }

    /// A bias-plus-one-arm model has a closed-form optimum: occurrence /
    /// exposure on each stratum.
    #[test]
    fn intercept_and_arm_fit_matches_closed_form_rates() {
        let dt = 1.0 / 12.0;
        let mut subjects = Vec::new();
        // Ten subjects, five on the arm throughout; events arranged so
        // both strata have events.
        for id in 0..10u64 {
            let steps = 6usize;
            let treated = id % 2 == 0;
            let event = id % 3 == 0;
            let followup = (steps as f64 - 0.5) * dt;
            subjects.push(SubjectPanel {
                subject_id: id,
                censor_time: followup,
                event_time: event.then_some(followup),
                arm: vec![treated.then_some(0); steps],
                x: Array2::zeros((steps, 1)),
            });
        }
        let ds = PanelDataset::new(subjects, dt, 1, 1, None).unwrap();
        let rows = ds.flat_rows_all();
        let opts = FitOptions {
            optim: OptimizerConfig { eps_stop: 1e-9, ..OptimizerConfig::default() },
            ..FitOptions::default()
        };
        let fit = fit_model(&rows, 1, &[], None, &opts, None).unwrap();
        let mut events = [0.0f64; 2];
        let mut exposure = [0.0f64; 2];
        for r in 0..rows.x.nrows() {
            let s = usize::from(rows.arm[r].is_some());
            exposure[s] += 1.0;
            if rows.event[r] {
                events[s] += 1.0;
            }
        }
        let b_want = (events[0] / exposure[0]).ln();
        let theta_want = (events[1] / exposure[1]).ln() - b_want;
        assert_abs_diff_eq!(fit.state.bias, b_want, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.state.theta[0], theta_want, epsilon = 1e-6);
    }

    #[test]
    fn no_events_is_an_error() {
        let ds = random_panel(301, 4);
        let mut subjects: Vec<SubjectPanel> = ds.subjects().to_vec();
        for s in &mut subjects {
            if s.event_time.is_some() {
                s.censor_time = s.event_time.unwrap();
                s.event_time = None;
            }
        }
        let quiet = PanelDataset::new(subjects, ds.dt(), ds.n_arms(), ds.n_covariates(), None).unwrap();
        let rows = quiet.flat_rows_all();
        assert!(matches!(
            fit_model(&rows, 2, &[], None, &FitOptions::default(), None),
            Err(EvidenceError::NoEvents)
        ));
    }

    #[test]
    fn grid_search_returns_argmax_of_trace() {
        let ds = random_panel(311, 12).normalize().unwrap();
        let template = ModelTemplate {
            kernels: vec![KernelTemplate::gaussian(&[0]), KernelTemplate::linear(1)],
            latent_prior: None,
        };
        let mut grids = BTreeMap::new();
        grids.insert(1usize, HyperGrid { lambdas: vec![0.5, 2.0], sigmas: vec![0.7, 1.5] });
        let out = grid_search(&ds, &template, &grids, &FitOptions::default()).unwrap();
        assert_eq!(out.trace.len(), 4);
        let max = out
            .trace
            .iter()
            .filter(|p| p.log_bme.is_finite())
            .map(|p| p.log_bme)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(out.best.log_bme, max, epsilon = 1e-12);
        assert_eq!(out.best.kernels[0].reg_lambda, out.best_assignment[&1].lambda);
        assert_eq!(out.best.kernels[0].bandwidth, out.best_assignment[&1].sigma);
        assert_eq!(out.best.kernels[1].reg_lambda, 0.0);
    }

    /// Events stacked onto late follow-up should make the elapsed-time
    /// augmentation win the evidence comparison; a memoryless panel with
    /// the same margins should not.
    #[test]
    fn audit_flags_time_trend_and_clears_homogeneous_data() {
        use rand::Rng;
        use rand::SeedableRng;
        let dt = 1.0 / 12.0;
        let max_steps = 12usize;
        let build = |trended: bool| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
            let mut subjects = Vec::new();
            for id in 0..120u64 {
                let mut event_step = None;
                for s in 0..max_steps {
                    let p = if trended {
                        0.30 * ((s + 1) as f64 / max_steps as f64).powi(2)
                    } else {
                        0.12
                    };
                    if rng.random_range(0.0..1.0) < p {
                        event_step = Some(s);
                        break;
                    }
                }
                let steps = event_step.map_or(max_steps, |s| s + 1);
                let followup = (steps as f64 - 0.5) * dt;
                subjects.push(SubjectPanel {
                    subject_id: id,
                    censor_time: followup,
                    event_time: event_step.map(|_| followup),
                    arm: (0..steps).map(|s| (s % 2 == 0).then_some(0)).collect(),
                    x: Array2::zeros((steps, 1)),
                });
            }
            PanelDataset::new(subjects, dt, 1, 1, None).unwrap()
        };
        let opts = FitOptions::default();
        let audit_grid =
            HyperGrid { lambdas: vec![1.0], sigmas: vec![0.3, 1.0] };
        let trended = build(true);
        let rows = trended.flat_rows_all();
        let base = fit_model(&rows, 1, &[], None, &opts, None).unwrap();
        let audit = time_homogeneity_audit(&trended, &base, 1, &audit_grid, &opts).unwrap();
        assert!(audit.violated, "trend must be flagged: {:?}", (audit.base_log_bme, audit.augmented_log_bme));

        let flat = build(false);
        let rows = flat.flat_rows_all();
        let base = fit_model(&rows, 1, &[], None, &opts, None).unwrap();
        let audit = time_homogeneity_audit(&flat, &base, 1, &audit_grid, &opts).unwrap();
        assert!(!audit.violated, "homogeneous panel must pass: {:?}", (audit.base_log_bme, audit.augmented_log_bme));
    }

    #[test]
    fn latent_anchor_shape_is_checked() {
        let ds = random_panel(331, 6);
        let rows = ds.flat_rows_all();
        let opts = FitOptions {
            latent_init: LatentInit::Anchored { kappa: 1.0, beta: vec![0.0; 7] },
            ..FitOptions::default()
        };
        let err = fit_model(&rows, 2, &[], Some(&[0]), &opts, None).unwrap_err();
        assert!(matches!(err, EvidenceError::AnchorShape { got: 7, want: 2 }));
    }

    #[test]
    fn latent_fit_carries_responsibilities() {
        let ds = random_panel(337, 8);
        let rows = ds.flat_rows_all();
        let opts = FitOptions {
            latent_init: LatentInit::Random { n_starts: 2, seed: 5 },
            ..FitOptions::default()
        };
        let fit = fit_model(&rows, 2, &[], Some(&[0, 1]), &opts, None).unwrap();
        let latent = fit.state.latent.as_ref().unwrap();
        assert_eq!(latent.responsibilities.len(), ds.n_subjects());
        for r in &latent.responsibilities {
            assert_abs_diff_eq!(r[0] + r[1], 1.0, epsilon = 1e-12);
        }
        assert!(fit.log_bme.is_finite());
    }
}
