//! Expectation-maximization for the latent-frailty hazard model.
//!
//! The latent model marginalizes a binary `Z` per subject. EM alternates
//! posterior updates (E-step) with warm-started minimization of the
//! responsibility-weighted complete-data objective plus ridge (M-step).
//! Each round cannot increase the penalized marginal negative
//! log-likelihood; the run records that value per round so callers can
//! audit monotone descent.
//!
//! The frailty label is only identified up to the swap
//! `(bias, kappa, beta) -> (bias + kappa, -kappa, -beta)`, so multi-start
//! fits are compared by objective value, not by parameter distance.

use crate::likelihood::{
    add_ridge, marginal_nll, responsibilities, weighted_value_grad, Design, ParamLayout,
};
use crate::optim::{minimize, OptimError, OptimizerConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("design carries no latent block")]
    NotLatent,
    #[error("M-step failed: {0}")]
    MStep(#[from] OptimError),
    #[error("no starting points supplied")]
    NoStarts,
}

/// EM stopping rule and M-step optimizer settings.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Absolute tolerance on the penalized marginal objective.
    pub tol: f64,
    pub max_iters: usize,
    pub optim: OptimizerConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-6,
            max_iters: 200,
            optim: OptimizerConfig { eps_stop: 1e-3, ..OptimizerConfig::default() },
        }
    }
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub x: Vec<f64>,
    pub responsibilities: Vec<[f64; 2]>,
    /// Penalized marginal objective at `x`.
    pub objective: f64,
    /// Unpenalized marginal negative log-likelihood at `x`.
    pub marginal_nll: f64,
    /// Objective after every round, starting with the initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Ridge value alone (no gradient side effects).
pub fn ridge_value(layout: &ParamLayout, lambdas: &[f64], x: &[f64]) -> f64 {
    let mut scratch = vec![0.0; x.len()];
    add_ridge(layout, lambdas, x, &mut scratch, 1.0)
}

/// Penalized marginal objective minimized by EM.
pub fn penalized_marginal(design: &Design, lambdas: &[f64], x: &[f64]) -> f64 {
    marginal_nll(design, x) + ridge_value(&design.layout(), lambdas, x)
}

/// One M-step: minimize the weighted complete-data objective plus ridge,
/// warm-started at `x0`.
pub fn m_step(
    design: &Design,
    lambdas: &[f64],
    resp: &[[f64; 2]],
    x0: &[f64],
    optim: &OptimizerConfig,
) -> Result<Vec<f64>, OptimError> {
    let layout = design.layout();
    let res = minimize(
        |x, grad| {
            let v = weighted_value_grad(design, resp, x, grad);
            v + add_ridge(&layout, lambdas, x, grad, 1.0)
        },
        x0,
        optim,
    )?;
    Ok(res.x)
}

/// Runs EM from one starting point.
pub fn em_fit(
    design: &Design,
    lambdas: &[f64],
    x0: &[f64],
    cfg: &EmConfig,
) -> Result<EmFit, EmError> {
    if design.latent.is_none() {
        return Err(EmError::NotLatent);
    }
    let mut x = x0.to_vec();
    let mut value = penalized_marginal(design, lambdas, &x);
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let resp = responsibilities(design, &x);
        x = m_step(design, lambdas, &resp, &x, &cfg.optim)?;
        let next = penalized_marginal(design, lambdas, &x);
        trace.push(next);
        if (value - next).abs() <= cfg.tol {
            value = next;
            converged = true;
            break;
        }
        value = next;
    }
    let responsibilities = responsibilities(design, &x);
    let marginal = marginal_nll(design, &x);
    Ok(EmFit {
        x,
        responsibilities,
        objective: value,
        marginal_nll: marginal,
        trace,
        iterations,
        converged,
    })
}

/// Runs EM from several starts and keeps the lowest objective. Ties (for
/// instance the exact label swap) resolve to the earliest start, keeping
/// the outcome deterministic.
pub fn em_fit_multistart(
    design: &Design,
    lambdas: &[f64],
    starts: &[Vec<f64>],
    cfg: &EmConfig,
) -> Result<EmFit, EmError> {
    let mut best: Option<EmFit> = None;
    if starts.is_empty() {
        return Err(EmError::NoStarts);
    }
    for x0 in starts {
        let fit = em_fit(design, lambdas, x0, cfg)?;
        let better = match &best {
            None => true,
            Some(b) => fit.objective < b.objective,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Builds randomized latent starting points around a base parameter
/// vector (typically an observed-covariate fit extended with zero latent
/// coordinates): `kappa` draws from `[0.5, 2.5]` with random sign, `beta`
/// from a small ball.
pub fn random_latent_starts(
    layout: &ParamLayout,
    base: &[f64],
    n_starts: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa_idx = layout.kappa_index().expect("latent layout");
    let beta_range = layout.beta_range().expect("latent layout");
    (0..n_starts)
        .map(|_| {
            let mut x = base.to_vec();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            x[kappa_idx] = sign * rng.random_range(0.5..2.5);
            for i in beta_range.clone() {
                x[i] = rng.random_range(-0.5..0.5);
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::tests::random_design;
    use crate::likelihood::variational_bound;
    use approx::assert_abs_diff_eq;

    fn lambdas_for(design: &Design) -> Vec<f64> {
        design.ranks.iter().map(|_| 0.5).collect()
    }

    #[test]
    fn rejects_non_latent_design() {
        let design = random_design(211, false);
        let lambdas = lambdas_for(&design);
        let x0 = vec![0.0; design.layout().len()];
        assert!(matches!(em_fit(&design, &lambdas, &x0, &EmConfig::default()), Err(EmError::NotLatent)));
    }

    #[test]
    fn objective_descends_monotonically() {
        let design = random_design(223, true);
        let lambdas = lambdas_for(&design);
        let layout = design.layout();
        let mut x0 = vec![0.0; layout.len()];
        x0[layout.kappa_index().unwrap()] = 1.0;
        let fit = em_fit(&design, &lambdas, &x0, &EmConfig::default()).unwrap();
        assert!(fit.trace.len() >= 2);
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "EM round increased objective: {} -> {}", w[0], w[1]);
        }
        assert!(fit.converged);
    }

    #[test]
    fn bound_is_tight_at_final_responsibilities() {
        let design = random_design(227, true);
        let lambdas = lambdas_for(&design);
        let layout = design.layout();
        let mut x0 = vec![0.0; layout.len()];
        x0[layout.kappa_index().unwrap()] = 0.7;
        let fit = em_fit(&design, &lambdas, &x0, &EmConfig::default()).unwrap();
        let bound = variational_bound(&design, &fit.responsibilities, &fit.x);
        assert_abs_diff_eq!(bound, fit.marginal_nll, epsilon = 1e-10);
    }

    #[test]
    fn label_swapped_start_reaches_same_objective() {
        let design = random_design(229, true);
        let lambdas = lambdas_for(&design);
        let layout = design.layout();
        let mut x0 = vec![0.0; layout.len()];
        x0[layout.kappa_index().unwrap()] = 1.2;
        x0[layout.beta_range().unwrap()][0] = 0.4;
        let mut swapped = x0.clone();
        swapped[layout.bias_index()] += x0[layout.kappa_index().unwrap()];
        swapped[layout.kappa_index().unwrap()] = -x0[layout.kappa_index().unwrap()];
        for i in layout.beta_range().unwrap() {
            swapped[i] = -swapped[i];
        }
        let cfg = EmConfig {
            tol: 1e-10,
            max_iters: 500,
            optim: OptimizerConfig { eps_stop: 1e-7, ..OptimizerConfig::default() },
        };
        let a = em_fit(&design, &lambdas, &x0, &cfg).unwrap();
        let b = em_fit(&design, &lambdas, &swapped, &cfg).unwrap();
        let denom = a.objective.abs().max(1.0);
        assert!(((a.objective - b.objective) / denom).abs() < 1e-8, "{} vs {}", a.objective, b.objective);
    }

    #[test]
    fn multistart_returns_lowest_objective() {
        let design = random_design(233, true);
        let lambdas = lambdas_for(&design);
        let layout = design.layout();
        let base = vec![0.0; layout.len()];
        let starts = random_latent_starts(&layout, &base, 4, 9);
        let cfg = EmConfig::default();
        let best = em_fit_multistart(&design, &lambdas, &starts, &cfg).unwrap();
        for s in &starts {
            let f = em_fit(&design, &lambdas, s, &cfg).unwrap();
            assert!(best.objective <= f.objective + 1e-9);
        }
    }

    #[test]
    fn empty_start_list_is_an_error() {
        let design = random_design(239, true);
        let lambdas = lambdas_for(&design);
        assert!(matches!(
            em_fit_multistart(&design, &lambdas, &[], &EmConfig::default()),
            Err(EmError::NoStarts)
        ));
    }
}
