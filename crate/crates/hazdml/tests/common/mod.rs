//! Shared helpers for the integration suites: a central-difference
//! gradient harness, public-API random panel builders, and an exactly
//! enumerable discrete cohort whose population quantities (occupancy,
//! person-time measures, the true density-ratio adjustment) have closed
//! forms, so orthogonality can be checked against exact expectations
//! rather than Monte-Carlo noise.

#![allow(dead_code)]

use hazdml::kernel::KernelSpec;
use hazdml::likelihood::Design;
use hazdml::panel::{PanelDataset, SubjectPanel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maximum relative error between an analytic gradient and central
/// finite differences, per coordinate, with a unit floor on the scale.
pub fn max_grad_rel_err<F>(mut f: F, x0: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut g = vec![0.0; n];
    f(x0, &mut g);
    let mut scratch = vec![0.0; n];
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut xp = x0.to_vec();
        xp[i] += eps;
        let mut xm = x0.to_vec();
        xm[i] -= eps;
        let fd = (f(&xp, &mut scratch) - f(&xm, &mut scratch)) / (2.0 * eps);
        let denom = g[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((g[i] - fd).abs() / denom);
    }
    worst
}

/// Random panel with the given shape, built through the public API.
pub fn random_dataset(seed: u64, n_subjects: usize, n_arms: usize, d: usize) -> PanelDataset {
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
        let mut x = Array2::<f64>::zeros((steps, d));
        for s in 0..steps {
            for j in 0..d {
                x[[s, j]] = rng.random_range(-1.5..1.5);
            }
        }
        let arm = (0..steps)
            .map(|_| {
                let draw = rng.random_range(0..=n_arms as u32);
                (draw > 0).then(|| draw as usize - 1)
            })
            .collect();
        subjects.push(SubjectPanel { subject_id: id as u64, censor_time, event_time, arm, x });
    }
    PanelDataset::new(subjects, dt, n_arms, d, None).unwrap()
}

/// Random design over a fresh panel: one Gaussian and one linear kernel,
/// optionally with a frailty block. Returns the design and a generic
/// interior parameter vector for gradient checks.
pub fn random_design(seed: u64, latent: bool) -> (Design, Vec<f64>) {
    let ds = random_dataset(seed, 6, 2, 3);
    let rows = ds.flat_rows_all();
    let k1 = KernelSpec::gaussian(&[0], 0.8, 1.0);
    let k2 = KernelSpec::linear(1);
    let b1 = hazdml::kernel::incomplete_cholesky(&k1, &rows.x.view(), 1e-8).unwrap();
    let b2 = hazdml::kernel::incomplete_cholesky(&k2, &rows.x.view(), 1e-8).unwrap();
    let design =
        Design::new(&rows, &[&b1, &b2], 2, latent.then_some(&[2usize][..])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x: Vec<f64> =
        (0..design.layout().len()).map(|_| rng.random_range(-0.6..0.6)).collect();
    (design, x)
}

/// Exactly enumerable cohort: two covariate states, one treatment arm,
/// three unit-width steps, no censoring randomness. Events occur per
/// step with probability `exp(theta* a + f*(x))`, the state follows a
/// two-state Markov chain, and treatment is drawn per step given the
/// state, so confounding is present whenever `p_treat` differs by state.
#[derive(Debug, Clone)]
pub struct DiscreteDgp {
    /// Initial state distribution.
    pub pi: [f64; 2],
    /// `trans[x][x']`.
    pub trans: [[f64; 2]; 2],
    /// Probability of treatment per step, by state.
    pub p_treat: [f64; 2],
    pub theta_star: f64,
    /// Adjustment values by state (absorb the step width).
    pub f_star: [f64; 2],
    pub n_steps: usize,
}

impl Default for DiscreteDgp {
    fn default() -> Self {
        DiscreteDgp {
            pi: [0.7, 0.3],
            trans: [[0.7, 0.3], [0.15, 0.85]],
            p_treat: [0.25, 0.6],
            theta_star: 0.7,
            f_star: [-2.2, -1.3],
            n_steps: 3,
        }
    }
}

impl DiscreteDgp {
    /// Per-step event probability in state `x` under arm status `a`.
    pub fn event_p(&self, x: usize, a: usize) -> f64 {
        (self.theta_star * a as f64 + self.f_star[x]).exp()
    }

    /// Occupancy `rho[t][x][a]` = P(alive at t, X_t = x, A_t = a).
    pub fn occupancy(&self) -> Vec<[[f64; 2]; 2]> {
        let mut rho = Vec::with_capacity(self.n_steps);
        let mut px = self.pi; // P(alive at t, X_t = x)
        for _ in 0..self.n_steps {
            let mut step = [[0.0; 2]; 2];
            for x in 0..2 {
                step[x][1] = px[x] * self.p_treat[x];
                step[x][0] = px[x] * (1.0 - self.p_treat[x]);
            }
            rho.push(step);
            let mut next = [0.0; 2];
            for x in 0..2 {
                let survive: f64 =
                    (0..2).map(|a| step[x][a] * (1.0 - self.event_p(x, a))).sum();
                for (xn, nv) in next.iter_mut().enumerate() {
                    *nv += survive * self.trans[x][xn];
                }
            }
            px = next;
        }
        rho
    }

    /// Person-time measures `mu[a][x]` = sum_t rho[t][x][a].
    pub fn mu(&self) -> [[f64; 2]; 2] {
        let mut mu = [[0.0; 2]; 2];
        for step in self.occupancy() {
            for x in 0..2 {
                for a in 0..2 {
                    mu[a][x] += step[x][a];
                }
            }
        }
        mu
    }

    /// True density-ratio adjustment by state: `ln(mu_1 / mu_0)`.
    pub fn g_star(&self) -> [f64; 2] {
        let mu = self.mu();
        [(mu[1][0] / mu[0][0]).ln(), (mu[1][1] / mu[0][1]).ln()]
    }

    /// Population mean of the ratio-route score at `(theta, f, g)`.
    pub fn e_phi_ratio(&self, theta: f64, f: [f64; 2], g: [f64; 2]) -> f64 {
        let mu = self.mu();
        let mut v = 0.0;
        for x in 0..2 {
            // Event terms use the true hazard; integral terms use `f`.
            v += mu[1][x] * self.event_p(x, 1) * (-theta).exp() * (1.0 + (-g[x]).exp());
            v -= mu[1][x] * f[x].exp() * (1.0 + (-g[x]).exp());
            v += mu[0][x] * f[x].exp() * (1.0 + g[x].exp());
            v -= mu[0][x] * self.event_p(x, 0) * (1.0 + g[x].exp());
        }
        v
    }

    /// Population mean of the treatment-block likelihood gradient at
    /// `(theta, f)` (the plain maximum-likelihood score).
    pub fn e_score_theta(&self, theta: f64, f: [f64; 2]) -> f64 {
        let mu = self.mu();
        (0..2)
            .map(|x| mu[1][x] * ((theta + f[x]).exp() - self.event_p(x, 1)))
            .sum()
    }

    /// Population mean of the adjustment-block gradient in state
    /// coordinates: `E[d l / d f(x)]` at `(theta, f)`.
    pub fn e_score_f(&self, theta: f64, f: [f64; 2]) -> [f64; 2] {
        let mu = self.mu();
        let mut out = [0.0; 2];
        for x in 0..2 {
            out[x] = mu[1][x] * ((theta + f[x]).exp() - self.event_p(x, 1))
                + mu[0][x] * (f[x].exp() - self.event_p(x, 0));
        }
        out
    }

    /// Population curvature blocks in state coordinates at `(theta, f)`:
    /// `(H_theta_f, diag H_ff)`.
    pub fn h_blocks(&self, theta: f64, f: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let mu = self.mu();
        let mut htf = [0.0; 2];
        let mut hff = [0.0; 2];
        for x in 0..2 {
            htf[x] = mu[1][x] * (theta + f[x]).exp();
            hff[x] = mu[1][x] * (theta + f[x]).exp() + mu[0][x] * f[x].exp();
        }
        (htf, hff)
    }

    /// Population mean of the projection-route score at `(theta, f)`,
    /// with the projection weights held at the true parameters and ridge
    /// `zeta` (state coordinates, diagonal curvature).
    pub fn e_phi_projection(&self, theta: f64, f: [f64; 2], zeta: f64) -> f64 {
        let (htf, hff) = self.h_blocks(self.theta_star, self.f_star);
        let sf = self.e_score_f(theta, f);
        let mut v = self.e_score_theta(theta, f);
        for x in 0..2 {
            v -= htf[x] / (hff[x] + zeta) * sf[x];
        }
        v
    }

    /// Closed-form Gateaux derivative of the projection-route population
    /// score along `psi` in f at the truth: `zeta H_tf (H_ff+zeta)^{-1} psi`.
    pub fn projection_f_derivative(&self, psi: [f64; 2], zeta: f64) -> f64 {
        let (htf, hff) = self.h_blocks(self.theta_star, self.f_star);
        (0..2).map(|x| zeta * htf[x] / (hff[x] + zeta) * psi[x]).sum()
    }

    /// Samples a cohort with one covariate column holding the state.
    pub fn sample(&self, seed: u64, n_subjects: usize) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subjects = Vec::new();
        for id in 0..n_subjects {
            let mut x_state = if rng.random_bool(self.pi[1]) { 1 } else { 0 };
            let mut xs = Vec::new();
            let mut arms = Vec::new();
            let mut event_time = None;
            for t in 0..self.n_steps {
                let a = usize::from(rng.random_bool(self.p_treat[x_state]));
                xs.push(x_state as f64);
                arms.push((a == 1).then_some(0));
                if rng.random_bool(self.event_p(x_state, a)) {
                    event_time = Some(t as f64 + 0.5);
                    break;
                }
                x_state = if rng.random_bool(self.trans[x_state][1]) { 1 } else { 0 };
            }
            let x = Array2::from_shape_vec((xs.len(), 1), xs).unwrap();
            subjects.push(SubjectPanel {
                subject_id: id as u64,
                censor_time: self.n_steps as f64 - 0.5,
                event_time,
                arm: arms,
                x,
            });
        }
        PanelDataset::new(subjects, 1.0, 1, 1, None).unwrap()
    }
}

#[cfg(test)]
mod self_checks {
    use super::*;

    #[test]
    fn occupancy_is_a_subprobability_measure() {
        let dgp = DiscreteDgp::default();
        let rho = dgp.occupancy();
        let mut prev = 1.0;
        for step in &rho {
            let total: f64 = step.iter().flatten().sum();
            assert!(total <= prev + 1e-12);
            assert!(total > 0.0);
            prev = total;
        }
    }
}
