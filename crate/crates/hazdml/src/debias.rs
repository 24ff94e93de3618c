//! Debiased estimation of the log hazard ratios from cross-fitted
//! estimating equations, with sandwich standard errors.
//!
//! Every route builds, for each holdout subject `i` and arm `k`, a score
//! that is affine in the exponentiated parameters:
//!
//! ```text
//! phi_ik(theta) = c_ik + sum_j M_ikj exp(theta_j)        (projection route)
//! phi_ik(theta) = S1_ik exp(-theta_k) - S2_ik + S3_ik - S4_ik   (ratio route)
//! ```
//!
//! The projection route removes the adjustment's influence through
//! weights `W = H_tf (H_ff + zeta I)^{-1}`; the ratio route reweights
//! person-time by fitted treatment odds. Latent-frailty models reuse the
//! projection route with per-branch terms mixed by the fold model's
//! posterior weights, which stay frozen during the solve.
//!
//! Summing over subjects gives an estimating equation whose root has a
//! closed form in `exp(theta)`; the latent route instead takes a single
//! Newton step from the model-stage estimate by default, with an
//! optional full solve. Standard errors come from the sandwich
//! `J^{-1} (n^{-2} sum_i phi_i phi_i') J^{-1}'`.

use crate::crossfit::FoldArtifacts;
use crate::evidence::evidence_hessian;
use crate::kernel::KernelSpec;
use crate::likelihood::{prior_nll_ds, Design, ETA_CLIP, G_CLIP};
use crate::linalg::{solve_general, solve_spd_multi, LinalgError};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("fold artifacts carry no projection weights (Hessian route not built)")]
    MissingW,
    #[error("fold artifacts carry no ratio values (ratio route not built)")]
    MissingG,
    #[error("fold artifacts carry no frozen posterior weights")]
    MissingResponsibilities,
    #[error("ratio route does not support latent models")]
    LatentRatioRoute,
    #[error("estimating equation root is not log-linear: exp(theta_{arm}) = {value}")]
    NoPositiveRoot { arm: usize, value: f64 },
    #[error("degenerate score for arm {arm}: {term} sums to a non-positive value")]
    DegenerateScore { arm: usize, term: &'static str },
    #[error("theta has {got} entries, scores span {want} arms")]
    ThetaShape { got: usize, want: usize },
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
}

/// One holdout subject's contribution to an affine-in-`exp(theta)` score.
#[derive(Debug, Clone)]
pub struct SubjectScore {
    /// Constant part, per arm.
    pub c: Array1<f64>,
    /// Coefficients of `exp(theta_j)`, arms by arms.
    pub m: Array2<f64>,
}

/// Accumulated estimating equation of the projection (and latent) route.
#[derive(Debug, Clone)]
pub struct ScoreSystem {
    pub subjects: Vec<SubjectScore>,
    pub n_arms: usize,
}

impl ScoreSystem {
    fn totals(&self) -> (Array1<f64>, Array2<f64>) {
        let k = self.n_arms;
        let mut c = Array1::<f64>::zeros(k);
        let mut m = Array2::<f64>::zeros((k, k));
        for s in &self.subjects {
            c += &s.c;
            m += &s.m;
        }
        (c, m)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Mean score `n^{-1} sum_i phi_i(theta)`.
    pub fn mean_score(&self, theta: &[f64]) -> Result<Array1<f64>, DebiasError> {
        if theta.len() != self.n_arms {
            return Err(DebiasError::ThetaShape { got: theta.len(), want: self.n_arms });
        }
        let (c, m) = self.totals();
        let e = Array1::from_iter(theta.iter().map(|t| t.exp()));
        Ok((c + m.dot(&e)) / self.subjects.len() as f64)
    }

    /// Jacobian of the mean score at `theta`.
    pub fn jacobian(&self, theta: &[f64]) -> Result<Array2<f64>, DebiasError> {
        if theta.len() != self.n_arms {
            return Err(DebiasError::ThetaShape { got: theta.len(), want: self.n_arms });
        }
        let (_, m) = self.totals();
        let n = self.subjects.len() as f64;
        let mut j = m;
        for col in 0..self.n_arms {
            let e = theta[col].exp() / n;
            for row in 0..self.n_arms {
                j[[row, col]] *= e;
            }
        }
        Ok(j)
    }

    /// Exact root of the estimating equation: solves the linear system in
    /// `exp(theta)` and errors when any component is non-positive.
    pub fn solve_exact(&self) -> Result<Vec<f64>, DebiasError> {
        let (c, m) = self.totals();
        let rhs = c.mapv(|v| -v);
        let x = solve_general(&m.view(), &rhs.view())?;
        for (arm, v) in x.iter().enumerate() {
            if *v <= 0.0 || !v.is_finite() {
                return Err(DebiasError::NoPositiveRoot { arm, value: *v });
            }
        }
        Ok(x.iter().map(|v| v.ln()).collect())
    }

    /// One Newton step from `theta0`.
    pub fn newton_step(&self, theta0: &[f64]) -> Result<Vec<f64>, DebiasError> {
        let s = self.mean_score(theta0)?;
        let j = self.jacobian(theta0)?;
        let delta = solve_general(&j.view(), &s.view())?;
        Ok(theta0.iter().zip(delta.iter()).map(|(t, d)| t - d).collect())
    }
}

/// A debiased estimate with sandwich uncertainty.
#[derive(Debug, Clone)]
pub struct DebiasedEstimate {
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    pub covariance: Array2<f64>,
    /// `(theta_k - theta_star_k) / se_k` when a reference was supplied.
    pub t_stats: Option<Vec<f64>>,
    pub n_subjects: usize,
    /// Ratio values clamped while assembling scores (ratio route only).
    pub clipped: usize,
}

fn clamp_exp(v: f64) -> f64 {
    v.clamp(-ETA_CLIP, ETA_CLIP).exp()
}

/// Adjustment values (kernel blocks plus bias, no treatment or latent
/// shift) per design row.
pub fn f_values(design: &Design, x: &[f64]) -> Array1<f64> {
    let layout = design.layout();
    let fc = Array1::from_iter(
        x[layout.n_arms..layout.n_arms + layout.p_basis].iter().copied(),
    );
    design.stacked.dot(&fc)
}

/// Builds the projection-route estimating equation from fold artifacts.
/// Latent models mix per-branch terms with the frozen fold posteriors.
pub fn projection_scores(arts: &[FoldArtifacts]) -> Result<ScoreSystem, DebiasError> {
    let mut subjects = Vec::new();
    let mut n_arms = 0usize;
    for art in arts {
        let design = &art.design;
        let layout = design.layout();
        n_arms = layout.n_arms;
        let w = art.w.as_ref().ok_or(DebiasError::MissingW)?;
        let latent = design.latent.is_some();
        let resp = if latent {
            Some(art.responsibilities.as_ref().ok_or(DebiasError::MissingResponsibilities)?)
        } else {
            None
        };
        let f_vals = f_values(design, &art.x);
        let p_f = design.p_f();
        let p_basis = design.p_basis();
        let kappa = latent.then(|| art.x[layout.kappa_index().unwrap()]);
        let beta = layout.beta_range().map(|r| art.x[r].to_vec());
        for local in art.n_train_subjects..design.n_subjects() {
            let range = design.subject_rows[local].clone();
            let branches: Vec<(f64, f64, f64)> = match resp {
                None => vec![(1.0, 0.0, 0.0)],
                Some(r) => {
                    let k = kappa.unwrap();
                    vec![(r[local][0], 0.0, 0.0), (r[local][1], k, 1.0)]
                }
            };
            let mut c = Array1::<f64>::zeros(n_arms);
            let mut m = Array2::<f64>::zeros((n_arms, n_arms));
            for (weight, shift, z) in branches {
                if weight == 0.0 {
                    continue;
                }
                // Per-branch terms: s_k, v_j (j = 1..K), v_0.
                let mut s = vec![0.0; n_arms];
                let mut v0 = Array1::<f64>::zeros(p_f);
                let mut v = vec![Array1::<f64>::zeros(p_f); n_arms];
                let mut event_arm: Option<Option<usize>> = None;
                for r in range.clone() {
                    let e = clamp_exp(f_vals[r] + shift);
                    let row = design.stacked.row(r);
                    match design.arm[r] {
                        Some(k) => {
                            s[k] += e;
                            for (cidx, b) in row.iter().enumerate() {
                                v[k][cidx] += e * b;
                            }
                            if latent {
                                v[k][p_basis] += e * z;
                            }
                        }
                        None => {
                            for (cidx, b) in row.iter().enumerate() {
                                v0[cidx] += e * b;
                            }
                            if latent {
                                v0[p_basis] += e * z;
                            }
                        }
                    }
                    if design.event[r] {
                        event_arm = Some(design.arm[r]);
                        for (cidx, b) in row.iter().enumerate() {
                            v0[cidx] -= b;
                        }
                        if latent {
                            v0[p_basis] -= z;
                        }
                    }
                }
                if let (Some(beta), Some(ld)) = (&beta, &design.latent) {
                    // Prior gradient enters the adjustment direction once
                    // per subject, on the beta coordinates.
                    let x0 = ld.x0.row(local);
                    let sdot: f64 = x0.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                    let dps = prior_nll_ds(sdot, z as usize);
                    for (cidx, xv) in x0.iter().enumerate() {
                        v0[p_basis + 1 + cidx] += dps * xv;
                    }
                }
                for k in 0..n_arms {
                    let wk = w.row(k);
                    let w_v0: f64 = wk.iter().zip(v0.iter()).map(|(a, b)| a * b).sum();
                    let mut ck = -w_v0;
                    if event_arm == Some(Some(k)) {
                        ck -= 1.0;
                    }
                    c[k] += weight * ck;
                    for j in 0..n_arms {
                        let w_vj: f64 = wk.iter().zip(v[j].iter()).map(|(a, b)| a * b).sum();
                        let delta = if j == k { s[k] } else { 0.0 };
                        m[[k, j]] += weight * (delta - w_vj);
                    }
                }
            }
            subjects.push(SubjectScore { c, m });
        }
    }
    Ok(ScoreSystem { subjects, n_arms })
}

/// One holdout subject's ratio-route terms, per arm.
#[derive(Debug, Clone)]
pub struct RatioTerms {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
    pub s4: Vec<f64>,
}

/// Accumulated ratio-route estimating equation.
#[derive(Debug, Clone)]
pub struct RatioSystem {
    pub subjects: Vec<RatioTerms>,
    pub n_arms: usize,
    pub clipped: usize,
}

impl RatioSystem {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Mean score per arm at `theta`.
    pub fn mean_score(&self, theta: &[f64]) -> Result<Array1<f64>, DebiasError> {
        if theta.len() != self.n_arms {
            return Err(DebiasError::ThetaShape { got: theta.len(), want: self.n_arms });
        }
        let n = self.subjects.len() as f64;
        let mut s = Array1::<f64>::zeros(self.n_arms);
        for t in &self.subjects {
            for k in 0..self.n_arms {
                s[k] += t.s1[k] * (-theta[k]).exp() - t.s2[k] + t.s3[k] - t.s4[k];
            }
        }
        Ok(s / n)
    }

    /// Closed-form root: `exp(-theta_k) = (S2 - S3 + S4) / S1` per arm.
    pub fn solve(&self) -> Result<Vec<f64>, DebiasError> {
        let mut theta = Vec::with_capacity(self.n_arms);
        for k in 0..self.n_arms {
            let s1: f64 = self.subjects.iter().map(|t| t.s1[k]).sum();
            let rhs: f64 =
                self.subjects.iter().map(|t| t.s2[k] - t.s3[k] + t.s4[k]).sum();
            if s1 <= 0.0 {
                return Err(DebiasError::DegenerateScore { arm: k, term: "S1" });
            }
            if rhs <= 0.0 {
                return Err(DebiasError::DegenerateScore { arm: k, term: "S2 - S3 + S4" });
            }
            theta.push(-(rhs / s1).ln());
        }
        Ok(theta)
    }

    /// Diagonal Jacobian of the mean score at `theta`.
    pub fn jacobian(&self, theta: &[f64]) -> Result<Array2<f64>, DebiasError> {
        if theta.len() != self.n_arms {
            return Err(DebiasError::ThetaShape { got: theta.len(), want: self.n_arms });
        }
        let n = self.subjects.len() as f64;
        let mut j = Array2::<f64>::zeros((self.n_arms, self.n_arms));
        for k in 0..self.n_arms {
            let s1: f64 = self.subjects.iter().map(|t| t.s1[k]).sum();
            j[[k, k]] = -(-theta[k]).exp() * s1 / n;
        }
        Ok(j)
    }
}

/// Builds the ratio-route estimating equation from fold artifacts.
pub fn ratio_scores(arts: &[FoldArtifacts]) -> Result<RatioSystem, DebiasError> {
    let mut subjects = Vec::new();
    let mut n_arms = 0usize;
    let mut clipped = 0usize;
    for art in arts {
        let design = &art.design;
        if design.latent.is_some() {
            return Err(DebiasError::LatentRatioRoute);
        }
        let layout = design.layout();
        n_arms = layout.n_arms;
        let g_vals = art.g_values.as_ref().ok_or(DebiasError::MissingG)?;
        let f_vals = f_values(design, &art.x);
        for local in art.n_train_subjects..design.n_subjects() {
            let range = design.subject_rows[local].clone();
            let mut t = RatioTerms {
                s1: vec![0.0; n_arms],
                s2: vec![0.0; n_arms],
                s3: vec![0.0; n_arms],
                s4: vec![0.0; n_arms],
            };
            for r in range {
                let e = clamp_exp(f_vals[r]);
                for k in 0..n_arms {
                    let mut g = g_vals[k][r];
                    if g.abs() > G_CLIP {
                        clipped += 1;
                        g = g.clamp(-G_CLIP, G_CLIP);
                    }
                    match design.arm[r] {
                        Some(a) if a == k => {
                            t.s2[k] += e * (1.0 + (-g).exp());
                            if design.event[r] {
                                t.s1[k] += 1.0 + (-g).exp();
                            }
                        }
                        Some(_) => {}
                        None => {
                            t.s3[k] += e * (1.0 + g.exp());
                            if design.event[r] {
                                t.s4[k] += 1.0 + g.exp();
                            }
                        }
                    }
                }
            }
            subjects.push(t);
        }
    }
    Ok(RatioSystem { subjects, n_arms, clipped })
}

fn sandwich_from_scores(
    phis: &[Array1<f64>],
    j: &Array2<f64>,
    theta: Vec<f64>,
    theta_star: Option<&[f64]>,
    clipped: usize,
) -> Result<DebiasedEstimate, DebiasError> {
    let n = phis.len();
    let k = theta.len();
    let mut meat = Array2::<f64>::zeros((k, k));
    for phi in phis {
        for a in 0..k {
            for b in 0..k {
                meat[[a, b]] += phi[a] * phi[b];
            }
        }
    }
    meat.mapv_inplace(|v| v / (n as f64 * n as f64));
    // covariance = J^{-1} meat J^{-1}'; obtained by solving J X = meat,
    // then J Y' = X' (row-wise solve for the right factor).
    let x = solve_columns(j, &meat)?;
    let xt = x.t().to_owned();
    let y = solve_columns(j, &xt)?;
    let covariance = y.t().to_owned();
    let se: Vec<f64> = (0..k).map(|i| covariance[[i, i]].max(0.0).sqrt()).collect();
    let t_stats = theta_star.map(|star| {
        theta
            .iter()
            .zip(star.iter())
            .zip(se.iter())
            .map(|((t, s), e)| (t - s) / e)
            .collect()
    });
    Ok(DebiasedEstimate { theta, se, covariance, t_stats, n_subjects: n, clipped })
}

fn solve_columns(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let mut out = Array2::<f64>::zeros(b.dim());
    for c in 0..b.ncols() {
        let col = b.column(c).to_owned();
        let x = solve_general(&a.view(), &col.view())?;
        out.column_mut(c).assign(&x);
    }
    Ok(out)
}

/// Projection-route estimate: exact root of the estimating equation plus
/// sandwich standard errors.
pub fn estimate_projection(
    arts: &[FoldArtifacts],
    theta_star: Option<&[f64]>,
) -> Result<DebiasedEstimate, DebiasError> {
    let system = projection_scores(arts)?;
    let theta = system.solve_exact()?;
    let j = system.jacobian(&theta)?;
    let e = Array1::from_iter(theta.iter().map(|t| t.exp()));
    let phis: Vec<Array1<f64>> =
        system.subjects.iter().map(|s| &s.c + &s.m.dot(&e)).collect();
    sandwich_from_scores(&phis, &j, theta, theta_star, 0)
}

/// Latent-route estimate: single Newton step from `theta_init` (or the
/// exact root of the frozen-posterior equation when `full_solve`).
pub fn estimate_latent(
    arts: &[FoldArtifacts],
    theta_init: &[f64],
    full_solve: bool,
    theta_star: Option<&[f64]>,
) -> Result<DebiasedEstimate, DebiasError> {
    let system = projection_scores(arts)?;
    let theta = if full_solve {
        system.solve_exact()?
    } else {
        system.newton_step(theta_init)?
    };
    let j = system.jacobian(&theta)?;
    let e = Array1::from_iter(theta.iter().map(|t| t.exp()));
    let phis: Vec<Array1<f64>> =
        system.subjects.iter().map(|s| &s.c + &s.m.dot(&e)).collect();
    sandwich_from_scores(&phis, &j, theta, theta_star, 0)
}

/// Ratio-route estimate: closed-form root plus sandwich standard errors.
pub fn estimate_ratio(
    arts: &[FoldArtifacts],
    theta_star: Option<&[f64]>,
) -> Result<DebiasedEstimate, DebiasError> {
    let system = ratio_scores(arts)?;
    let theta = system.solve()?;
    let j = system.jacobian(&theta)?;
    let phis: Vec<Array1<f64>> = system
        .subjects
        .iter()
        .map(|t| {
            Array1::from_iter((0..system.n_arms).map(|k| {
                t.s1[k] * (-theta[k]).exp() - t.s2[k] + t.s3[k] - t.s4[k]
            }))
        })
        .collect();
    sandwich_from_scores(&phis, &j, theta, theta_star, system.clipped)
}

/// Naive maximum-likelihood uncertainty: treatment-block diagonal of the
/// inverse penalized-objective Hessian at the fitted parameters.
pub fn naive_theta_se(
    design: &Design,
    kernels: &[KernelSpec],
    x: &[f64],
) -> Result<Vec<f64>, DebiasError> {
    let layout = design.layout();
    let h = evidence_hessian(design, kernels, x);
    let mut rhs = Array2::<f64>::zeros((layout.len(), layout.n_arms));
    for k in 0..layout.n_arms {
        rhs[[k, k]] = 1.0;
    }
    let inv_cols = solve_spd_multi(&h.view(), &rhs.view())?;
    Ok((0..layout.n_arms).map(|k| inv_cols[[k, k]].max(0.0).sqrt()).collect())
}
