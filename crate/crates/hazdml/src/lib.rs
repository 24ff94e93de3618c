//! Debiased estimation of hazard ratios under kernel-based machine-learning
//! covariate adjustment.
//!
//! The crate fits a multiplicative hazard model on a discretized time grid:
//! the per-step event intensity of subject `i` at step `t` is
//! `exp(theta' A_it + f(X_it))`, where `A_it` is a vector of mutually
//! exclusive binary treatment indicators, `theta` holds the log hazard
//! ratios of interest, and `f` is an unknown nuisance function of the
//! covariates modeled as a sum of reproducing-kernel components plus a bias.
//!
//! Estimation proceeds in three stages:
//!
//! 1. **Model building** ([`evidence`]): hyperparameters and kernel sets are
//!    compared by Laplace-approximated log model evidence, including an
//!    audit for violations of time homogeneity and an optional latent
//!    binary frailty fitted by EM ([`em`]).
//! 2. **Cross-fitted nuisance estimation** ([`crossfit`]): the sample is
//!    split into folds; the covariate adjustment and auxiliary nuisances
//!    (Hessian blocks or treatment-density ratios) are fitted out-of-fold.
//! 3. **Debiased solve** ([`debias`]): Neyman-orthogonal estimating
//!    equations are assembled on held-out folds and solved in closed form,
//!    with a cross-fitted sandwich covariance for inference.
//!
//! Supporting modules: [`panel`] (data model and text format), [`kernel`]
//! (Gram matrices, pivoted incomplete Cholesky, coordinate transfer),
//! [`likelihood`] (objectives, gradients, Hessian blocks), [`optim`]
//! (L-BFGS), [`sim`] (synthetic cohorts for validation experiments), and
//! [`linalg`] (small dense factorizations).

pub mod crossfit;
pub mod debias;
pub mod em;
pub mod evidence;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod optim;
pub mod panel;
pub mod sim;
