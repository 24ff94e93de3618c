//! Objectives, gradients, and Hessian blocks for the discretized hazard
//! model and its companions.
//!
//! A subject contributes one term per timestep. With linear predictor
//! `eta_it = theta' A_it + f(X_it)`, the step's negative log-likelihood is
//!
//! ```text
//! U_it = -[event at step t] * eta_it + exp(eta_it)
//! ```
//!
//! i.e. a piecewise-constant-intensity likelihood on the step grid. The
//! grid width is absorbed into the bias of `f`, so no explicit `dt` factor
//! appears. The adjustment `f` is a sum of low-rank kernel components plus
//! a bias, parametrized by orthonormal coordinates `u_k` (see
//! [`crate::kernel`]); its coordinate design is captured by [`Design`].
//!
//! Four objective families share that design:
//!
//! * the plain penalized likelihood of the observed-covariate model;
//! * the marginalized likelihood of the latent-frailty model, where a
//!   binary `Z` with a logistic prior on baseline covariates shifts the
//!   predictor by `kappa Z`;
//! * the responsibility-weighted surrogate minimized in EM M-steps;
//! * the logistic objective for per-arm treatment density ratios `g_k`.
//!
//! Linear predictors are clamped to `[-40, 40]`; clamped rows are counted
//! and reported so a run can flag predictor blow-ups instead of silently
//! saturating.

use crate::kernel::LowRankBasis;
use crate::panel::FlatRows;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Clamp bound for linear predictors inside `exp`.
pub const ETA_CLIP: f64 = 40.0;

/// Clamp bound for treatment density-ratio values inside `exp` when they
/// enter estimating equations and cross-validation errors.
pub const G_CLIP: f64 = 15.0;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("design mismatch: {0}")]
    Design(String),
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Latent-prior design: baseline covariates entering the logistic prior of
/// the binary frailty, with an intercept in column 0.
#[derive(Debug, Clone)]
pub struct LatentDesign {
    /// Shape `(n_subjects, 1 + prior covariates)`.
    pub x0: Array2<f64>,
}

impl LatentDesign {
    pub fn n_beta(&self) -> usize {
        self.x0.ncols()
    }
}

/// Row-level coordinate design binding a flattened panel to kernel bases.
#[derive(Debug, Clone)]
pub struct Design {
    /// Per-row coordinate matrix `(rows, sum of ranks + 1)`: the kernel
    /// bases side by side, then an all-ones bias column.
    pub stacked: Array2<f64>,
    /// Rank of each kernel block, in `stacked` column order.
    pub ranks: Vec<usize>,
    pub n_arms: usize,
    /// Active arm per row.
    pub arm: Vec<Option<usize>>,
    /// Event indicator per row.
    pub event: Vec<bool>,
    /// Half-open row ranges per subject.
    pub subject_rows: Vec<Range<usize>>,
    pub latent: Option<LatentDesign>,
}

impl Design {
    /// Assembles a design from flattened rows and the kernel bases fitted
    /// on them. `latent_prior` selects covariate columns whose baseline
    /// values parametrize the frailty prior.
    pub fn new(
        rows: &FlatRows,
        bases: &[&LowRankBasis],
        n_arms: usize,
        latent_prior: Option<&[usize]>,
    ) -> Result<Design, LikelihoodError> {
        let n = rows.x.nrows();
        for b in bases {
            if b.n_rows() != n {
                return Err(LikelihoodError::Design(format!(
                    "basis has {} rows, data has {n}",
                    b.n_rows()
                )));
            }
        }
        let ranks: Vec<usize> = bases.iter().map(|b| b.rank()).collect();
        let p = ranks.iter().sum::<usize>() + 1;
        let mut stacked = Array2::<f64>::zeros((n, p));
        let mut off = 0usize;
        for b in bases {
            stacked.slice_mut(ndarray::s![.., off..off + b.rank()]).assign(&b.l);
            off += b.rank();
        }
        stacked.column_mut(p - 1).fill(1.0);
        let latent = match latent_prior {
            None => None,
            Some(cols) => {
                let mut x0 = Array2::<f64>::zeros((rows.subject_rows.len(), cols.len() + 1));
                for (i, range) in rows.subject_rows.iter().enumerate() {
                    x0[[i, 0]] = 1.0;
                    for (c, &j) in cols.iter().enumerate() {
                        x0[[i, c + 1]] = rows.x[[range.start, j]];
                    }
                }
                Some(LatentDesign { x0 })
            }
        };
        Ok(Design {
            stacked,
            ranks,
            n_arms,
            arm: rows.arm.clone(),
            event: rows.event.clone(),
            subject_rows: rows.subject_rows.clone(),
            latent,
        })
    }

    /// Builds a design from pre-stacked basis columns (used for transfers
    /// where the basis matrix is already assembled).
    pub fn from_stacked(
        stacked: Array2<f64>,
        ranks: Vec<usize>,
        n_arms: usize,
        arm: Vec<Option<usize>>,
        event: Vec<bool>,
        subject_rows: Vec<Range<usize>>,
        latent: Option<LatentDesign>,
    ) -> Design {
        Design { stacked, ranks, n_arms, arm, event, subject_rows, latent }
    }

    pub fn n_rows(&self) -> usize {
        self.stacked.nrows()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_rows.len()
    }

    /// Basis coordinates: kernel blocks plus bias.
    pub fn p_basis(&self) -> usize {
        self.stacked.ncols()
    }

    /// Total adjustment coordinates, including latent `(kappa, beta)` when
    /// present. This is the column dimension of cross blocks `H_tf`.
    pub fn p_f(&self) -> usize {
        self.p_basis() + self.latent.as_ref().map_or(0, |l| 1 + l.n_beta())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_arms: self.n_arms,
            ranks: self.ranks.clone(),
            p_basis: self.p_basis(),
            n_beta: self.latent.as_ref().map(|l| l.n_beta()),
        }
    }
}

/// Offsets of the packed parameter vector
/// `[theta | u_1 .. u_J | bias | kappa beta...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_arms: usize,
    pub ranks: Vec<usize>,
    pub p_basis: usize,
    /// Latent prior coefficient count (including intercept) when latent.
    pub n_beta: Option<usize>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.n_arms + self.p_basis + self.n_beta.map_or(0, |nb| 1 + nb)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_range(&self) -> Range<usize> {
        0..self.n_arms
    }

    pub fn u_range(&self, k: usize) -> Range<usize> {
        let start = self.n_arms + self.ranks[..k].iter().sum::<usize>();
        start..start + self.ranks[k]
    }

    pub fn bias_index(&self) -> usize {
        self.n_arms + self.p_basis - 1
    }

    pub fn kappa_index(&self) -> Option<usize> {
        self.n_beta.map(|_| self.n_arms + self.p_basis)
    }

    pub fn beta_range(&self) -> Option<Range<usize>> {
        self.n_beta.map(|nb| {
            let start = self.n_arms + self.p_basis + 1;
            start..start + nb
        })
    }

    /// Adjustment coordinates (everything except `theta`).
    pub fn f_range(&self) -> Range<usize> {
        self.n_arms..self.len()
    }
}

/// Latent-frailty parameters and per-subject posterior weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentState {
    pub kappa: f64,
    pub beta: Vec<f64>,
    /// Posterior `P(Z = z | subject)` per subject, `[z = 0, z = 1]`.
    pub responsibilities: Vec<[f64; 2]>,
}

/// Fitted parameters of one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitState {
    pub theta: Vec<f64>,
    pub u_blocks: Vec<Vec<f64>>,
    pub bias: f64,
    pub latent: Option<LatentState>,
}

impl FitState {
    pub fn pack(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut x = vec![0.0; layout.len()];
        x[..layout.n_arms].copy_from_slice(&self.theta);
        for (k, u) in self.u_blocks.iter().enumerate() {
            x[layout.u_range(k)].copy_from_slice(u);
        }
        x[layout.bias_index()] = self.bias;
        if let Some(l) = &self.latent {
            x[layout.kappa_index().expect("latent layout")] = l.kappa;
            x[layout.beta_range().expect("latent layout")].copy_from_slice(&l.beta);
        }
        x
    }

    pub fn unpack(x: &[f64], layout: &ParamLayout) -> FitState {
        let theta = x[layout.theta_range()].to_vec();
        let u_blocks: Vec<Vec<f64>> =
            (0..layout.ranks.len()).map(|k| x[layout.u_range(k)].to_vec()).collect();
        let bias = x[layout.bias_index()];
        let latent = layout.n_beta.map(|_| LatentState {
            kappa: x[layout.kappa_index().unwrap()],
            beta: x[layout.beta_range().unwrap()].to_vec(),
            responsibilities: Vec::new(),
        });
        FitState { theta, u_blocks, bias, latent }
    }
}

/// Diagnostics accumulated during an objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalStats {
    /// Rows whose linear predictor hit the clamp bound.
    pub clipped_rows: usize,
}

/// Hessian of a likelihood split into treatment/adjustment blocks.
///
/// `h_tf` and `h_ff` span all adjustment coordinates (kernel blocks, bias,
/// and latent `(kappa, beta)` when present).
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    pub h_tt: Array2<f64>,
    pub h_tf: Array2<f64>,
    pub h_ff: Array2<f64>,
}

impl HessianBlocks {
    fn zeros(k: usize, p: usize) -> Self {
        HessianBlocks {
            h_tt: Array2::zeros((k, k)),
            h_tf: Array2::zeros((k, p)),
            h_ff: Array2::zeros((p, p)),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.h_tt.mapv_inplace(|v| v * c);
        self.h_tf.mapv_inplace(|v| v * c);
        self.h_ff.mapv_inplace(|v| v * c);
    }

    pub fn add(&mut self, other: &HessianBlocks) {
        self.h_tt += &other.h_tt;
        self.h_tf += &other.h_tf;
        self.h_ff += &other.h_ff;
    }

    /// Assembles the full symmetric matrix over `[theta | f]` coordinates.
    pub fn full(&self) -> Array2<f64> {
        let k = self.h_tt.nrows();
        let p = self.h_ff.nrows();
        let mut h = Array2::<f64>::zeros((k + p, k + p));
        h.slice_mut(ndarray::s![..k, ..k]).assign(&self.h_tt);
        h.slice_mut(ndarray::s![..k, k..]).assign(&self.h_tf);
        h.slice_mut(ndarray::s![k.., ..k]).assign(&self.h_tf.t());
        h.slice_mut(ndarray::s![k.., k..]).assign(&self.h_ff);
        h
    }
}

fn clamp_eta(eta: f64, stats: &mut EvalStats) -> f64 {
    if eta > ETA_CLIP {
        stats.clipped_rows += 1;
        ETA_CLIP
    } else if eta < -ETA_CLIP {
        stats.clipped_rows += 1;
        -ETA_CLIP
    } else {
        eta
    }
}

/// Per-row linear predictors `theta' A + B [u; b]` (without any latent
/// shift), unclamped.
pub fn linear_predictors(design: &Design, x: &[f64]) -> Array1<f64> {
    let layout = design.layout();
    let fcoords =
        Array1::from_iter(x[layout.n_arms..layout.n_arms + layout.p_basis].iter().copied());
    let mut eta = design.stacked.dot(&fcoords);
    for (r, arm) in design.arm.iter().enumerate() {
        if let Some(k) = arm {
            eta[r] += x[*k];
        }
    }
    eta
}

/// Value and gradient of the unpenalized negative log-likelihood of the
/// plain (no-latent) model. `grad` must have the layout's length.
pub fn plain_value_grad(design: &Design, x: &[f64], grad: &mut [f64]) -> (f64, EvalStats) {
    let layout = design.layout();
    debug_assert_eq!(grad.len(), layout.len());
    let mut stats = EvalStats::default();
    let eta = linear_predictors(design, x);
    let mut value = 0.0;
    // g_row = dU/deta accumulated once, then pushed through the design.
    let mut grow = Array1::<f64>::zeros(design.n_rows());
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    for r in 0..design.n_rows() {
        let e = clamp_eta(eta[r], &mut stats);
        let w = e.exp();
        let ev = design.event[r];
        value += w - if ev { e } else { 0.0 };
        let wg = if eta[r].abs() > ETA_CLIP { 0.0 } else { w };
        let g = wg - if ev { 1.0 } else { 0.0 };
        grow[r] = g;
        if let Some(k) = design.arm[r] {
            grad[k] += g;
        }
    }
    let gf = design.stacked.t().dot(&grow);
    grad[layout.n_arms..layout.n_arms + layout.p_basis].copy_from_slice(gf.as_slice().unwrap());
    (value, stats)
}

/// Unpenalized negative log-likelihood of the plain model.
pub fn plain_nll(design: &Design, x: &[f64]) -> (f64, EvalStats) {
    let mut stats = EvalStats::default();
    let eta = linear_predictors(design, x);
    let mut value = 0.0;
    for r in 0..design.n_rows() {
        let e = clamp_eta(eta[r], &mut stats);
        value += e.exp() - if design.event[r] { e } else { 0.0 };
    }
    (value, stats)
}

/// Adds the ridge penalty `sum_k lambda_k/2 |u_k|^2` (and its gradient) to
/// an objective value. Usable for every family that penalizes kernel
/// blocks.
pub fn add_ridge(layout: &ParamLayout, lambdas: &[f64], x: &[f64], grad: &mut [f64], factor: f64) -> f64 {
    debug_assert_eq!(lambdas.len(), layout.ranks.len());
    let mut pen = 0.0;
    for (k, &lam) in lambdas.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        for i in layout.u_range(k) {
            pen += 0.5 * factor * lam * x[i] * x[i];
            grad[i] += factor * lam * x[i];
        }
    }
    pen
}

/// How Hessian accumulations are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Raw sum over subjects (used for evidence computations).
    Sum,
    /// Average over subjects (used for nuisance blocks).
    PerSubject,
}

/// Hessian blocks of the plain unpenalized negative log-likelihood.
pub fn hessian_plain(design: &Design, x: &[f64], normalize: Normalize) -> HessianBlocks {
    let mut blocks = subject_range_hessian_plain(design, x, 0..design.n_subjects());
    if normalize == Normalize::PerSubject {
        blocks.scale(1.0 / design.n_subjects() as f64);
    }
    blocks
}

/// Sum of per-subject plain Hessians over a contiguous subject range.
pub fn subject_range_hessian_plain(
    design: &Design,
    x: &[f64],
    subjects: Range<usize>,
) -> HessianBlocks {
    let layout = design.layout();
    let k = layout.n_arms;
    let p = layout.p_basis;
    let mut blocks = HessianBlocks::zeros(k, p);
    let eta = linear_predictors(design, x);
    let row_lo = design.subject_rows[subjects.start].start;
    let row_hi = design.subject_rows[subjects.end - 1].end;
    // Weighted cross-products: H_ff = B' W B over the row block.
    let mut wb = design.stacked.slice(ndarray::s![row_lo..row_hi, ..]).to_owned();
    let mut stats = EvalStats::default();
    for (local, r) in (row_lo..row_hi).enumerate() {
        let e = clamp_eta(eta[r], &mut stats);
        let w = if eta[r].abs() > ETA_CLIP { 0.0 } else { e.exp() };
        for v in wb.row_mut(local).iter_mut() {
            *v *= w;
        }
        if let Some(arm) = design.arm[r] {
            blocks.h_tt[[arm, arm]] += w;
            for (c, b) in design.stacked.row(r).iter().enumerate() {
                blocks.h_tf[[arm, c]] += w * b;
            }
        }
    }
    let b_block = design.stacked.slice(ndarray::s![row_lo..row_hi, ..]);
    blocks.h_ff = b_block.t().dot(&wb);
    blocks
}

/// Gradient contribution of a single subject under the plain model,
/// returned as `(d theta, d f)`.
pub fn subject_grad_plain(design: &Design, x: &[f64], subject: usize) -> (Vec<f64>, Vec<f64>) {
    let layout = design.layout();
    let eta = linear_predictors(design, x);
    let mut gt = vec![0.0; layout.n_arms];
    let mut gf = vec![0.0; layout.p_basis];
    let mut stats = EvalStats::default();
    for r in design.subject_rows[subject].clone() {
        let e = clamp_eta(eta[r], &mut stats);
        let w = if eta[r].abs() > ETA_CLIP { 0.0 } else { e.exp() };
        let g = w - if design.event[r] { 1.0 } else { 0.0 };
        if let Some(k) = design.arm[r] {
            gt[k] += g;
        }
        for (c, b) in design.stacked.row(r).iter().enumerate() {
            gf[c] += g * b;
        }
    }
    (gt, gf)
}

// ---------------------------------------------------------------------------
// Latent-frailty marginal likelihood
// ---------------------------------------------------------------------------

/// Negative log prior `-ln P(Z = z | X0)` of the logistic frailty prior,
/// `P(Z = 1 | X0) = sigmoid(beta' X0)`.
fn prior_nll(s: f64, z: usize) -> f64 {
    let sign = if z == 1 { 1.0 } else { -1.0 };
    // ln(1 + exp(-sign * s)), stable for large |s|.
    let v = -sign * s;
    if v > 0.0 {
        v + (1.0 + (-v).exp()).ln()
    } else {
        (1.0 + v.exp()).ln()
    }
}

/// d/ds of `prior_nll`.
pub(crate) fn prior_nll_ds(s: f64, z: usize) -> f64 {
    let sign = if z == 1 { 1.0 } else { -1.0 };
    -sign * sigmoid(-sign * s)
}

/// Branch negative log-likelihoods `l_i(z)` for one subject under the
/// latent model, including the prior term.
pub fn subject_branch_nll(design: &Design, x: &[f64], eta: &Array1<f64>, subject: usize) -> [f64; 2] {
    let layout = design.layout();
    let latent = design.latent.as_ref().expect("latent design");
    let kappa = x[layout.kappa_index().expect("latent layout")];
    let beta = &x[layout.beta_range().expect("latent layout")];
    let s: f64 = latent.x0.row(subject).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 2];
    for z in 0..2 {
        let shift = kappa * z as f64;
        let mut acc = prior_nll(s, z);
        let mut stats = EvalStats::default();
        for r in design.subject_rows[subject].clone() {
            let e = clamp_eta(eta[r] + shift, &mut stats);
            acc += e.exp() - if design.event[r] { e } else { 0.0 };
        }
        out[z] = acc;
    }
    out
}

/// Posterior responsibilities for every subject at the given parameters.
pub fn responsibilities(design: &Design, x: &[f64]) -> Vec<[f64; 2]> {
    let eta = linear_predictors(design, x);
    (0..design.n_subjects())
        .map(|i| {
            let l = subject_branch_nll(design, x, &eta, i);
            branch_posterior(l)
        })
        .collect()
}

/// Converts branch negative log-likelihoods into posterior weights,
/// computed in log space.
pub fn branch_posterior(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].min(l[1]);
    let w0 = (-(l[0] - m)).exp();
    let w1 = (-(l[1] - m)).exp();
    let s = w0 + w1;
    [w0 / s, w1 / s]
}

/// Marginal negative log-likelihood of the latent model (sum over
/// subjects of `-ln sum_z exp(-l_i(z))`).
pub fn marginal_nll(design: &Design, x: &[f64]) -> f64 {
    let eta = linear_predictors(design, x);
    let mut total = 0.0;
    for i in 0..design.n_subjects() {
        let l = subject_branch_nll(design, x, &eta, i);
        let m = l[0].min(l[1]);
        total += m - ((-(l[0] - m)).exp() + (-(l[1] - m)).exp()).ln();
    }
    total
}

/// Per-branch gradient of `l_i(z)` over the full coordinate vector.
fn subject_branch_grad(
    design: &Design,
    x: &[f64],
    eta: &Array1<f64>,
    subject: usize,
    z: usize,
    out: &mut [f64],
) {
    let layout = design.layout();
    let latent = design.latent.as_ref().expect("latent design");
    let kappa = x[layout.kappa_index().unwrap()];
    let beta = &x[layout.beta_range().unwrap()];
    let s: f64 = latent.x0.row(subject).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    for g in out.iter_mut() {
        *g = 0.0;
    }
    let zf = z as f64;
    let mut stats = EvalStats::default();
    for r in design.subject_rows[subject].clone() {
        let raw = eta[r] + kappa * zf;
        let e = clamp_eta(raw, &mut stats);
        let w = if raw.abs() > ETA_CLIP { 0.0 } else { e.exp() };
        let g = w - if design.event[r] { 1.0 } else { 0.0 };
        if let Some(k) = design.arm[r] {
            out[k] += g;
        }
        for (c, b) in design.stacked.row(r).iter().enumerate() {
            out[layout.n_arms + c] += g * b;
        }
        out[layout.kappa_index().unwrap()] += g * zf;
    }
    let dps = prior_nll_ds(s, z);
    let beta_range = layout.beta_range().unwrap();
    for (c, v) in latent.x0.row(subject).iter().enumerate() {
        out[beta_range.start + c] += dps * v;
    }
}

/// Value and gradient of the marginal negative log-likelihood.
pub fn marginal_value_grad(design: &Design, x: &[f64], grad: &mut [f64]) -> f64 {
    let layout = design.layout();
    debug_assert_eq!(grad.len(), layout.len());
    let eta = linear_predictors(design, x);
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let mut total = 0.0;
    let mut branch = vec![0.0; layout.len()];
    for i in 0..design.n_subjects() {
        let l = subject_branch_nll(design, x, &eta, i);
        let m = l[0].min(l[1]);
        total += m - ((-(l[0] - m)).exp() + (-(l[1] - m)).exp()).ln();
        let r = branch_posterior(l);
        for z in 0..2 {
            if r[z] == 0.0 {
                continue;
            }
            subject_branch_grad(design, x, &eta, i, z, &mut branch);
            for (g, b) in grad.iter_mut().zip(&branch) {
                *g += r[z] * b;
            }
        }
    }
    total
}

/// Marginal gradient contribution of one subject, `(d theta, d f)` with
/// the adjustment part spanning `[u | bias | kappa | beta]`.
pub fn subject_grad_marginal(design: &Design, x: &[f64], subject: usize) -> (Vec<f64>, Vec<f64>) {
    let layout = design.layout();
    let eta = linear_predictors(design, x);
    let l = subject_branch_nll(design, x, &eta, subject);
    let r = branch_posterior(l);
    let mut branch = vec![0.0; layout.len()];
    let mut acc = vec![0.0; layout.len()];
    for z in 0..2 {
        if r[z] == 0.0 {
            continue;
        }
        subject_branch_grad(design, x, &eta, subject, z, &mut branch);
        for (a, b) in acc.iter_mut().zip(&branch) {
            *a += r[z] * b;
        }
    }
    let gt = acc[layout.theta_range()].to_vec();
    let gf = acc[layout.f_range()].to_vec();
    (gt, gf)
}

/// Per-branch Hessian of `l_i(z)` over the full coordinates (dense, small
/// helper for the marginal Hessian assembly).
fn subject_branch_hessian(
    design: &Design,
    x: &[f64],
    eta: &Array1<f64>,
    subject: usize,
    z: usize,
) -> Array2<f64> {
    let layout = design.layout();
    let latent = design.latent.as_ref().expect("latent design");
    let n = layout.len();
    let kappa = x[layout.kappa_index().unwrap()];
    let beta = &x[layout.beta_range().unwrap()];
    let s: f64 = latent.x0.row(subject).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let mut h = Array2::<f64>::zeros((n, n));
    let zf = z as f64;
    let kappa_idx = layout.kappa_index().unwrap();
    let mut stats = EvalStats::default();
    for r in design.subject_rows[subject].clone() {
        let raw = eta[r] + kappa * zf;
        let e = clamp_eta(raw, &mut stats);
        let w = if raw.abs() > ETA_CLIP { 0.0 } else { e.exp() };
        if w == 0.0 {
            continue;
        }
        // J = one-hot(arm) | B_row | zf on kappa | 0 on beta.
        let mut j = vec![0.0; n];
        if let Some(k) = design.arm[r] {
            j[k] = 1.0;
        }
        for (c, b) in design.stacked.row(r).iter().enumerate() {
            j[layout.n_arms + c] = *b;
        }
        j[kappa_idx] = zf;
        for a in 0..n {
            if j[a] == 0.0 {
                continue;
            }
            let wj = w * j[a];
            for b in 0..n {
                h[[a, b]] += wj * j[b];
            }
        }
    }
    // Prior curvature: sigma(v)(1 - sigma(v)) x0 x0' on the beta block
    // (identical for both branches).
    let sig = sigmoid(s);
    let curve = sig * (1.0 - sig);
    let beta_range = layout.beta_range().unwrap();
    for (a, va) in latent.x0.row(subject).iter().enumerate() {
        for (b, vb) in latent.x0.row(subject).iter().enumerate() {
            h[[beta_range.start + a, beta_range.start + b]] += curve * va * vb;
        }
    }
    h
}

/// Hessian blocks of the marginal negative log-likelihood, including the
/// posterior-covariance correction:
/// `H_i = E_r[H_i(z)] + E_r[g] E_r[g]' - E_r[g g']`.
pub fn hessian_marginal(design: &Design, x: &[f64], normalize: Normalize) -> HessianBlocks {
    let mut blocks = subject_range_hessian_marginal(design, x, 0..design.n_subjects());
    if normalize == Normalize::PerSubject {
        blocks.scale(1.0 / design.n_subjects() as f64);
    }
    blocks
}

/// Sum of per-subject marginal Hessians over a contiguous subject range.
pub fn subject_range_hessian_marginal(
    design: &Design,
    x: &[f64],
    subjects: Range<usize>,
) -> HessianBlocks {
    let layout = design.layout();
    let n = layout.len();
    let eta = linear_predictors(design, x);
    let mut full = Array2::<f64>::zeros((n, n));
    let mut branch_grad = vec![0.0; n];
    for i in subjects {
        let l = subject_branch_nll(design, x, &eta, i);
        let r = branch_posterior(l);
        let mut mean_grad = Array1::<f64>::zeros(n);
        for z in 0..2 {
            if r[z] == 0.0 {
                continue;
            }
            let h = subject_branch_hessian(design, x, &eta, i, z);
            subject_branch_grad(design, x, &eta, i, z, &mut branch_grad);
            let g = Array1::from_iter(branch_grad.iter().copied());
            // E_r[H] - E_r[g g'] accumulated jointly.
            full.scaled_add(r[z], &h);
            for a in 0..n {
                if g[a] == 0.0 {
                    continue;
                }
                let ra = r[z] * g[a];
                for b in 0..n {
                    full[[a, b]] -= ra * g[b];
                }
            }
            mean_grad.scaled_add(r[z], &g);
        }
        for a in 0..n {
            if mean_grad[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                full[[a, b]] += mean_grad[a] * mean_grad[b];
            }
        }
    }
    let k = layout.n_arms;
    let p = layout.len() - k;
    let mut blocks = HessianBlocks::zeros(k, p);
    blocks.h_tt.assign(&full.slice(ndarray::s![..k, ..k]));
    blocks.h_tf.assign(&full.slice(ndarray::s![..k, k..]));
    blocks.h_ff.assign(&full.slice(ndarray::s![k.., k..]));
    blocks
}

// ---------------------------------------------------------------------------
// EM surrogate (responsibility-weighted complete-data likelihood)
// ---------------------------------------------------------------------------

/// Value and gradient of `sum_i sum_z r_iz l_i(z)` for fixed weights.
/// This is the data term minimized in an M-step.
pub fn weighted_value_grad(
    design: &Design,
    resp: &[[f64; 2]],
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let layout = design.layout();
    debug_assert_eq!(resp.len(), design.n_subjects());
    debug_assert_eq!(grad.len(), layout.len());
    let eta = linear_predictors(design, x);
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let mut total = 0.0;
    let mut branch = vec![0.0; layout.len()];
    for i in 0..design.n_subjects() {
        let l = subject_branch_nll(design, x, &eta, i);
        for z in 0..2 {
            let w = resp[i][z];
            if w == 0.0 {
                continue;
            }
            total += w * l[z];
            subject_branch_grad(design, x, &eta, i, z, &mut branch);
            for (g, b) in grad.iter_mut().zip(&branch) {
                *g += w * b;
            }
        }
    }
    total
}

/// Variational objective `sum_i sum_z r_iz (l_i(z) + ln r_iz)`. At the
/// posterior weights this equals the marginal negative log-likelihood.
pub fn variational_bound(design: &Design, resp: &[[f64; 2]], x: &[f64]) -> f64 {
    let eta = linear_predictors(design, x);
    let mut total = 0.0;
    for i in 0..design.n_subjects() {
        let l = subject_branch_nll(design, x, &eta, i);
        for z in 0..2 {
            let w = resp[i][z];
            if w > 0.0 {
                total += w * (l[z] + w.ln());
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Logistic treatment density-ratio objective
// ---------------------------------------------------------------------------

/// Value and gradient of the logistic objective for arm `k`:
/// `dt * sum_rows [A_k ln(1 + e^{-g}) + (1 - sum_l A_l) ln(1 + e^{g})]`
/// over coordinates `[u | bias]` of the ratio model's design. Rows on
/// other arms carry no weight.
pub fn logistic_value_grad(
    design: &Design,
    arm_k: usize,
    dt: f64,
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let p = design.p_basis();
    debug_assert_eq!(x.len(), p);
    debug_assert_eq!(grad.len(), p);
    let fc = Array1::from_iter(x.iter().copied());
    let g_vals = design.stacked.dot(&fc);
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let mut grow = Array1::<f64>::zeros(design.n_rows());
    let mut total = 0.0;
    for r in 0..design.n_rows() {
        let (w1, w0) = match design.arm[r] {
            Some(k) if k == arm_k => (1.0, 0.0),
            Some(_) => (0.0, 0.0),
            None => (0.0, 1.0),
        };
        if w1 == 0.0 && w0 == 0.0 {
            continue;
        }
        let g = g_vals[r];
        // ln(1 + e^{-g}) and ln(1 + e^{g}), stable.
        let lp = |v: f64| if v > 0.0 { v + (1.0 + (-v).exp()).ln() } else { (1.0 + v.exp()).ln() };
        total += w1 * lp(-g) + w0 * lp(g);
        grow[r] = w1 * (sigmoid(g) - 1.0) + w0 * sigmoid(g);
    }
    let gf = design.stacked.t().dot(&grow);
    for (out, v) in grad.iter_mut().zip(gf.iter()) {
        *out = dt * v;
    }
    total * dt
}

/// Hessian of the logistic objective over `[u | bias]`.
pub fn logistic_hessian(design: &Design, arm_k: usize, dt: f64, x: &[f64]) -> Array2<f64> {
    let fc = Array1::from_iter(x.iter().copied());
    let g_vals = design.stacked.dot(&fc);
    let mut wb = design.stacked.to_owned();
    for r in 0..design.n_rows() {
        let w = match design.arm[r] {
            Some(k) if k == arm_k => 1.0,
            Some(_) => 0.0,
            None => 1.0,
        };
        let sig = sigmoid(g_vals[r]);
        let c = dt * w * sig * (1.0 - sig);
        for v in wb.row_mut(r).iter_mut() {
            *v *= c;
        }
    }
    design.stacked.t().dot(&wb)
}

/// Builds a ones-only design (bias coordinate only, no kernels) over the
/// given rows; used for intercept-only ratio models and tests.
pub fn bias_only_design(rows: &FlatRows, n_arms: usize) -> Design {
    let n = rows.x.nrows();
    Design {
        stacked: Array2::ones((n, 1)),
        ranks: Vec::new(),
        n_arms,
        arm: rows.arm.clone(),
        event: rows.event.clone(),
        subject_rows: rows.subject_rows.clone(),
        latent: None,
    }
}

/// Stacks transfer values/bases for several kernels into design columns,
/// preserving the `[u_1 .. u_J | bias]` layout.
pub fn stack_bases(bases: &[ArrayView2<f64>], n_rows: usize) -> (Array2<f64>, Vec<usize>) {
    let ranks: Vec<usize> = bases.iter().map(|b| b.ncols()).collect();
    let p = ranks.iter().sum::<usize>() + 1;
    let mut stacked = Array2::<f64>::zeros((n_rows, p));
    let mut off = 0;
    for b in bases {
        stacked.slice_mut(ndarray::s![.., off..off + b.ncols()]).assign(b);
        off += b.ncols();
    }
    stacked.column_mut(p - 1).fill(1.0);
    (stacked, ranks)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kernel::{incomplete_cholesky, KernelSpec};
    use crate::panel::{PanelDataset, SubjectPanel};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Small random panel: 2 arms, 3 covariates, a few subjects.
    pub(crate) fn random_panel(seed: u64, n_subjects: usize) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = 1.0 / 12.0;
        let mut subjects = Vec::new();
        for id in 0..n_subjects {
            let steps = rng.random_range(3..9usize);
            let event = rng.random_bool(0.5);
            let followup = (steps as f64 - 0.5) * dt;
            let (event_time, censor_time) = if event {
                (Some(followup), followup + rng.random_range(0.0..1.0))
            } else {
                (None, followup)
            };
            let mut x = Array2::<f64>::zeros((steps, 3));
            for s in 0..steps {
                for j in 0..3 {
                    x[[s, j]] = rng.random_range(-1.5..1.5);
                }
            }
            let arm = (0..steps)
                .map(|_| match rng.random_range(0..3u32) {
                    0 => None,
                    1 => Some(0),
                    _ => Some(1),
                })
                .collect();
            subjects.push(SubjectPanel {
                subject_id: id as u64,
                censor_time,
                event_time,
                arm,
                x,
            });
        }
        PanelDataset::new(subjects, dt, 2, 3, None).unwrap()
    }

    pub(crate) fn random_design(seed: u64, latent: bool) -> Design {
        let ds = random_panel(seed, 6);
        let rows = ds.flat_rows_all();
        let k1 = KernelSpec::gaussian(&[0], 0.8, 1.0);
        let k2 = KernelSpec::linear(1);
        let b1 = incomplete_cholesky(&k1, &rows.x.view(), 1e-8).unwrap();
        let b2 = incomplete_cholesky(&k2, &rows.x.view(), 1e-8).unwrap();
        let prior: &[usize] = &[2];
        Design::new(&rows, &[&b1, &b2], 2, latent.then_some(prior)).unwrap()
    }

    fn random_params(layout: &ParamLayout, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layout.len()).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn fd_check<F>(mut f: F, x: &[f64], tol: f64)
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let n = x.len();
        let mut grad = vec![0.0; n];
        f(x, &mut grad);
        let mut scratch = vec![0.0; n];
        let h = 1.0e-6;
        for i in 0..n {
            let mut xp = x.to_vec();
            xp[i] += h;
            let fp = f(&xp, &mut scratch);
            xp[i] -= 2.0 * h;
            let fm = f(&xp, &mut scratch);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1.0);
            assert!(
                ((fd - grad[i]) / denom).abs() < tol,
                "coordinate {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let design = random_design(3, true);
        let layout = design.layout();
        let x = random_params(&layout, 5, 0.7);
        let state = FitState::unpack(&x, &layout);
        assert_eq!(state.pack(&layout), x);
    }

    #[test]
    fn zero_state_no_events_gradient_is_exposure_count() {
        // With f = 0 and theta = 0 every row has weight exp(0) = 1, so the
        // theta gradient counts treated rows and the bias gradient counts
        // all rows.
        let ds = random_panel(11, 5);
        let rows = ds.flat_rows_all();
        let mut design = bias_only_design(&rows, 2);
        design.event.iter_mut().for_each(|e| *e = false);
        let layout = design.layout();
        let x = vec![0.0; layout.len()];
        let mut grad = vec![0.0; layout.len()];
        plain_value_grad(&design, &x, &mut grad);
        let treated0 = design.arm.iter().filter(|a| **a == Some(0)).count() as f64;
        let treated1 = design.arm.iter().filter(|a| **a == Some(1)).count() as f64;
        assert_abs_diff_eq!(grad[0], treated0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], treated1, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[layout.bias_index()], design.n_rows() as f64, epsilon = 1e-12);
    }

    #[test]
    fn plain_gradient_matches_finite_differences() {
        let design = random_design(7, false);
        let layout = design.layout();
        let x = random_params(&layout, 13, 0.6);
        fd_check(|p, g| plain_value_grad(&design, p, g).0, &x, 1e-6);
    }

    #[test]
    fn ridge_gradient_matches_finite_differences() {
        let design = random_design(19, false);
        let layout = design.layout();
        let x = random_params(&layout, 23, 0.6);
        let lambdas = vec![0.7, 2.3];
        let f = |p: &[f64], g: &mut [f64]| {
            let (v, _) = plain_value_grad(&design, p, g);
            v + add_ridge(&layout, &lambdas, p, g, 1.0)
        };
        fd_check(f, &x, 1e-6);
    }

    #[test]
    fn plain_hessian_matches_gradient_differences() {
        let design = random_design(29, false);
        let layout = design.layout();
        let x = random_params(&layout, 31, 0.5);
        let blocks = hessian_plain(&design, &x, Normalize::Sum);
        let full = blocks.full();
        let n = layout.len();
        let h = 1.0e-6;
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            plain_value_grad(&design, &xp, &mut gp);
            xp[i] -= 2.0 * h;
            plain_value_grad(&design, &xp, &mut gm);
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let denom = fd.abs().max(full[[i, j]].abs()).max(1.0);
                assert!(
                    ((fd - full[[i, j]]) / denom).abs() < 1e-5,
                    "H[{i},{j}] fd {fd} vs {}",
                    full[[i, j]]
                );
            }
        }
    }

    #[test]
    fn per_subject_pieces_sum_to_totals() {
        let design = random_design(37, false);
        let layout = design.layout();
        let x = random_params(&layout, 41, 0.5);
        let mut grad = vec![0.0; layout.len()];
        plain_value_grad(&design, &x, &mut grad);
        let mut sum_t = vec![0.0; layout.n_arms];
        let mut sum_f = vec![0.0; layout.p_basis];
        for i in 0..design.n_subjects() {
            let (gt, gf) = subject_grad_plain(&design, &x, i);
            for (a, b) in sum_t.iter_mut().zip(&gt) {
                *a += b;
            }
            for (a, b) in sum_f.iter_mut().zip(&gf) {
                *a += b;
            }
        }
        for (k, v) in sum_t.iter().enumerate() {
            assert_abs_diff_eq!(*v, grad[k], epsilon = 1e-9);
        }
        for (c, v) in sum_f.iter().enumerate() {
            assert_abs_diff_eq!(*v, grad[layout.n_arms + c], epsilon = 1e-9);
        }
        // Hessians likewise.
        let total = hessian_plain(&design, &x, Normalize::Sum);
        let mut acc = HessianBlocks::zeros(layout.n_arms, layout.p_basis);
        for i in 0..design.n_subjects() {
            acc.add(&subject_range_hessian_plain(&design, &x, i..i + 1));
        }
        for (a, b) in acc.h_ff.iter().zip(total.h_ff.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let design = random_design(43, true);
        let layout = design.layout();
        let x = random_params(&layout, 47, 0.5);
        fd_check(|p, g| marginal_value_grad(&design, p, g), &x, 1e-6);
    }

    #[test]
    fn marginal_hessian_matches_gradient_differences() {
        let design = random_design(53, true);
        let layout = design.layout();
        let x = random_params(&layout, 59, 0.4);
        let blocks = hessian_marginal(&design, &x, Normalize::Sum);
        let full = blocks.full();
        let n = layout.len();
        let h = 1.0e-6;
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            marginal_value_grad(&design, &xp, &mut gp);
            xp[i] -= 2.0 * h;
            marginal_value_grad(&design, &xp, &mut gm);
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let denom = fd.abs().max(full[[i, j]].abs()).max(1.0);
                assert!(
                    ((fd - full[[i, j]]) / denom).abs() < 1e-4,
                    "H[{i},{j}] fd {fd} vs {}",
                    full[[i, j]]
                );
            }
        }
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let design = random_design(61, true);
        let layout = design.layout();
        let x = random_params(&layout, 67, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let resp: Vec<[f64; 2]> = (0..design.n_subjects())
            .map(|_| {
                let r = rng.random_range(0.05..0.95);
                [r, 1.0 - r]
            })
            .collect();
        fd_check(|p, g| weighted_value_grad(&design, &resp, p, g), &x, 1e-6);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let design = random_design(73, false);
        let p = design.p_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-0.8..0.8)).collect();
        let dt = 1.0 / 12.0;
        fd_check(|p_, g| logistic_value_grad(&design, 0, dt, p_, g), &x, 1e-6);
    }

    #[test]
    fn logistic_hessian_matches_gradient_differences() {
        let design = random_design(83, false);
        let p = design.p_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-0.8..0.8)).collect();
        let dt = 1.0 / 12.0;
        let hess = logistic_hessian(&design, 1, dt, &x);
        let h = 1.0e-6;
        let mut gp = vec![0.0; p];
        let mut gm = vec![0.0; p];
        for i in 0..p {
            let mut xp = x.clone();
            xp[i] += h;
            logistic_value_grad(&design, 1, dt, &xp, &mut gp);
            xp[i] -= 2.0 * h;
            logistic_value_grad(&design, 1, dt, &xp, &mut gm);
            for j in 0..p {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let denom = fd.abs().max(hess[[i, j]].abs()).max(1.0);
                assert!(((fd - hess[[i, j]]) / denom).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn responsibilities_are_posteriors() {
        let design = random_design(97, true);
        let layout = design.layout();
        let x = random_params(&layout, 101, 0.5);
        let resp = responsibilities(&design, &x);
        let eta = linear_predictors(&design, &x);
        for (i, r) in resp.iter().enumerate() {
            assert_abs_diff_eq!(r[0] + r[1], 1.0, epsilon = 1e-12);
            let l = subject_branch_nll(&design, &x, &eta, i);
            // Direct two-branch computation.
            let want1 = 1.0 / (1.0 + (l[1] - l[0]).exp());
            assert_abs_diff_eq!(r[1], want1, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_at_posterior_equals_marginal() {
        let design = random_design(103, true);
        let layout = design.layout();
        let x = random_params(&layout, 107, 0.5);
        let resp = responsibilities(&design, &x);
        let bound = variational_bound(&design, &resp, &x);
        let marg = marginal_nll(&design, &x);
        assert_abs_diff_eq!(bound, marg, epsilon = 1e-10);
        // Perturbed weights give a strictly larger bound.
        let mut worse = resp.clone();
        worse[0] = [0.5 * worse[0][0], 1.0 - 0.5 * worse[0][0]];
        assert!(variational_bound(&design, &worse, &x) > marg);
    }

    #[test]
    fn label_swap_leaves_marginal_invariant() {
        let design = random_design(109, true);
        let layout = design.layout();
        let x = random_params(&layout, 113, 0.5);
        let a = marginal_nll(&design, &x);
        let mut swapped = x.clone();
        let kappa_idx = layout.kappa_index().unwrap();
        swapped[layout.bias_index()] += x[kappa_idx];
        swapped[kappa_idx] = -x[kappa_idx];
        for i in layout.beta_range().unwrap() {
            swapped[i] = -x[i];
        }
        let b = marginal_nll(&design, &swapped);
        let denom = a.abs().max(1.0);
        assert!(((a - b) / denom).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn predictor_clamp_is_counted() {
        let ds = random_panel(127, 3);
        let rows = ds.flat_rows_all();
        let design = bias_only_design(&rows, 2);
        let layout = design.layout();
        let mut x = vec![0.0; layout.len()];
        x[layout.bias_index()] = 55.0; // beyond the clamp
        let (v, stats) = plain_nll(&design, &x);
        assert_eq!(stats.clipped_rows, design.n_rows());
        assert!(v.is_finite());
    }
}
