//! Versioned JSON artifacts: fitted models, nuisance bundles, estimates.
//!
//! Artifacts store fitted coordinates, never kernel bases: a basis is a
//! deterministic function of the dataset rows and the factorization
//! tolerance, so loading an artifact rebuilds it against the same panel
//! and verifies the panel's shape instead of trusting a stale copy.
//! Every file carries `schema_version` and a `kind` tag.

use crate::error::{data_io, CliError};
use hazdml::crossfit::{build_fold_artifacts, FoldArtifacts, FoldModel, FoldPlan, GFit};
use hazdml::debias::DebiasedEstimate;
use hazdml::evidence::FittedModel;
use hazdml::kernel::{incomplete_cholesky, KernelSpec, LowRankBasis};
use hazdml::likelihood::FitState;
use hazdml::panel::{FlatRows, PanelDataset};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::Path;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Writes an artifact as pretty-printed JSON.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| data_io(path, e))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| data_io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_header(path: &Path, kind: &str, got_kind: &str, version: u32) -> Result<(), CliError> {
    if got_kind != kind {
        return Err(CliError::Data(format!(
            "{}: expected a {kind} file, found kind {got_kind:?}",
            path.display()
        )));
    }
    if version != ARTIFACT_SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{}: schema_version {version} unsupported (this build reads version {})",
            path.display(),
            ARTIFACT_SCHEMA_VERSION
        )));
    }
    Ok(())
}

/// Shape fingerprint binding an artifact to the panel it was built from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PanelShape {
    pub n_subjects: usize,
    pub n_rows: usize,
    pub n_arms: usize,
    pub n_covariates: usize,
}

impl PanelShape {
    pub fn of(ds: &PanelDataset) -> PanelShape {
        PanelShape {
            n_subjects: ds.n_subjects(),
            n_rows: ds.total_rows(),
            n_arms: ds.n_arms(),
            n_covariates: ds.n_covariates(),
        }
    }

    pub fn check(&self, ds: &PanelDataset, path: &Path) -> Result<(), CliError> {
        let got = PanelShape::of(ds);
        if got != *self {
            return Err(CliError::Data(format!(
                "{}: panel does not match the artifact (artifact: {} subjects, {} rows, {} arms, \
                 {} covariates; panel: {} subjects, {} rows, {} arms, {} covariates)",
                path.display(),
                self.n_subjects,
                self.n_rows,
                self.n_arms,
                self.n_covariates,
                got.n_subjects,
                got.n_rows,
                got.n_arms,
                got.n_covariates,
            )));
        }
        Ok(())
    }
}

fn build_bases(
    kernels: &[KernelSpec],
    rows: &FlatRows,
    ic_tol: f64,
) -> Result<Vec<LowRankBasis>, CliError> {
    kernels
        .iter()
        .map(|spec| incomplete_cholesky(spec, &rows.x.view(), ic_tol).map_err(CliError::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Fitted model
// ---------------------------------------------------------------------------

/// A fitted outcome model on the normalized covariate scale.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub kind: String,
    pub panel: PanelShape,
    pub ic_tol: f64,
    pub kernels: Vec<KernelSpec>,
    pub latent_prior: Option<Vec<usize>>,
    pub state: FitState,
    pub value: f64,
    pub nll: f64,
    pub log_bme: f64,
    pub clipped_rows: usize,
    pub converged: bool,
}

impl ModelFile {
    pub fn new(ds: &PanelDataset, fit: &FittedModel, ic_tol: f64) -> ModelFile {
        ModelFile {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            kind: "model".into(),
            panel: PanelShape::of(ds),
            ic_tol,
            kernels: fit.kernels.clone(),
            latent_prior: fit.latent_prior.clone(),
            state: fit.state.clone(),
            value: fit.value,
            nll: fit.nll,
            log_bme: fit.log_bme,
            clipped_rows: fit.clipped_rows,
            converged: fit.converged,
        }
    }

    pub fn load(path: &Path) -> Result<ModelFile, CliError> {
        let f: ModelFile = load_json(path)?;
        check_header(path, "model", &f.kind, f.schema_version)?;
        Ok(f)
    }

    /// Rebuilds the fitted model against the (normalized) panel it was
    /// trained on.
    pub fn rebuild(&self, ds: &PanelDataset, path: &Path) -> Result<FittedModel, CliError> {
        self.panel.check(ds, path)?;
        let rows = ds.flat_rows_all();
        let bases = build_bases(&self.kernels, &rows, self.ic_tol)?;
        Ok(FittedModel {
            kernels: self.kernels.clone(),
            latent_prior: self.latent_prior.clone(),
            bases,
            state: self.state.clone(),
            value: self.value,
            nll: self.nll,
            log_bme: self.log_bme,
            clipped_rows: self.clipped_rows,
            converged: self.converged,
        })
    }
}

// ---------------------------------------------------------------------------
// Nuisance bundle
// ---------------------------------------------------------------------------

/// One fold model's persisted fit.
#[derive(Debug, Serialize, Deserialize)]
pub struct FoldStateFile {
    pub fold: usize,
    pub state: FitState,
    pub value: f64,
    pub nll: f64,
    pub log_bme: f64,
    pub clipped_rows: usize,
    pub converged: bool,
}

/// One fold-and-arm ratio model's persisted fit.
#[derive(Debug, Serialize, Deserialize)]
pub struct GCoordFile {
    pub arm: usize,
    pub zeta: f64,
    pub coords: Vec<f64>,
    pub value: f64,
}

/// Cross-fitted nuisances for one debiasing route.
#[derive(Debug, Serialize, Deserialize)]
pub struct NuisanceFile {
    pub schema_version: u32,
    pub kind: String,
    pub route: String,
    pub panel: PanelShape,
    pub ic_tol: f64,
    pub folds: usize,
    pub fold_seed: u64,
    pub kernels: Vec<KernelSpec>,
    pub latent_prior: Option<Vec<usize>>,
    pub fold_states: Vec<FoldStateFile>,
    /// Projection ridge (projection and latent routes).
    pub zeta_h: Option<f64>,
    /// Ratio-model kernels (ratio route).
    pub g_kernels: Option<Vec<KernelSpec>>,
    /// Ratio ridge per arm (ratio route).
    pub zetas_g: Option<Vec<f64>>,
    /// Ratio fits indexed `[fold][arm]` (ratio route).
    pub g_states: Option<Vec<Vec<GCoordFile>>>,
    /// Full-data treatment estimate (latent route's Newton start).
    pub theta_full: Option<Vec<f64>>,
}

impl NuisanceFile {
    pub fn load(path: &Path) -> Result<NuisanceFile, CliError> {
        let f: NuisanceFile = load_json(path)?;
        check_header(path, "nuisance", &f.kind, f.schema_version)?;
        Ok(f)
    }

    pub fn fold_models(models: &[FoldModel]) -> Vec<FoldStateFile> {
        models
            .iter()
            .map(|fm| FoldStateFile {
                fold: fm.fold,
                state: fm.fit.state.clone(),
                value: fm.fit.value,
                nll: fm.fit.nll,
                log_bme: fm.fit.log_bme,
                clipped_rows: fm.fit.clipped_rows,
                converged: fm.fit.converged,
            })
            .collect()
    }

    pub fn g_fits(fits: &[Vec<GFit>]) -> Vec<Vec<GCoordFile>> {
        fits.iter()
            .map(|per_arm| {
                per_arm
                    .iter()
                    .map(|g| GCoordFile {
                        arm: g.arm,
                        zeta: g.zeta,
                        coords: g.coords.clone(),
                        value: g.value,
                    })
                    .collect()
            })
            .collect()
    }

    /// Rebuilds per-fold artifacts against the (normalized) panel: the
    /// fold plan is re-derived from its seed, bases are refactorized per
    /// training split, and the stored coordinates plug back in.
    pub fn rebuild(&self, ds: &PanelDataset, path: &Path) -> Result<Vec<FoldArtifacts>, CliError> {
        self.panel.check(ds, path)?;
        let plan = FoldPlan::new(ds.n_subjects(), self.folds, self.fold_seed)?;
        if self.fold_states.len() != plan.n_folds() {
            return Err(CliError::Data(format!(
                "{}: bundle has {} fold states for a {}-fold plan",
                path.display(),
                self.fold_states.len(),
                plan.n_folds()
            )));
        }
        let mut models = Vec::with_capacity(self.fold_states.len());
        for fs in &self.fold_states {
            let train = plan.train(fs.fold);
            let rows = ds.flat_rows(&train);
            let bases = build_bases(&self.kernels, &rows, self.ic_tol)?;
            models.push(FoldModel {
                fold: fs.fold,
                train_subjects: train,
                fit: FittedModel {
                    kernels: self.kernels.clone(),
                    latent_prior: self.latent_prior.clone(),
                    bases,
                    state: fs.state.clone(),
                    value: fs.value,
                    nll: fs.nll,
                    log_bme: fs.log_bme,
                    clipped_rows: fs.clipped_rows,
                    converged: fs.converged,
                },
            });
        }
        let g_fits: Option<Vec<Vec<GFit>>> = match (&self.g_states, &self.g_kernels) {
            (Some(states), Some(g_kernels)) => {
                let mut per_fold = Vec::with_capacity(states.len());
                for (fold, per_arm) in states.iter().enumerate() {
                    let train = plan.train(fold);
                    let rows = ds.flat_rows(&train);
                    let bases = build_bases(g_kernels, &rows, self.ic_tol)?;
                    per_fold.push(
                        per_arm
                            .iter()
                            .map(|g| GFit {
                                arm: g.arm,
                                zeta: g.zeta,
                                kernels: g_kernels.clone(),
                                bases: bases.clone(),
                                coords: g.coords.clone(),
                                value: g.value,
                            })
                            .collect(),
                    );
                }
                Some(per_fold)
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(CliError::Data(format!(
                    "{}: bundle has ratio states but no ratio kernels",
                    path.display()
                )))
            }
        };
        Ok(build_fold_artifacts(ds, &plan, &models, self.zeta_h, g_fits.as_deref(), self.ic_tol)?)
    }
}

// ---------------------------------------------------------------------------
// Estimate
// ---------------------------------------------------------------------------

/// A treatment-effect estimate with its uncertainty.
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateFile {
    pub schema_version: u32,
    pub kind: String,
    pub estimator: String,
    pub panel: PanelShape,
    pub theta: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major sandwich covariance of `theta`.
    pub covariance: Vec<Vec<f64>>,
    /// `(theta - theta_star) / se` when a reference was supplied.
    pub t_stats: Option<Vec<f64>>,
    pub n_subjects: usize,
    /// Ratio values clamped while assembling scores (ratio route).
    pub clipped: usize,
    pub zeta_h: Option<f64>,
    pub zetas_g: Option<Vec<f64>>,
}

impl EstimateFile {
    pub fn new(
        estimator: &str,
        ds: &PanelDataset,
        est: &DebiasedEstimate,
        zeta_h: Option<f64>,
        zetas_g: Option<Vec<f64>>,
    ) -> EstimateFile {
        EstimateFile {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            kind: "estimate".into(),
            estimator: estimator.into(),
            panel: PanelShape::of(ds),
            theta: est.theta.clone(),
            se: est.se.clone(),
            covariance: est
                .covariance
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            t_stats: est.t_stats.clone(),
            n_subjects: est.n_subjects,
            clipped: est.clipped,
            zeta_h,
            zetas_g,
        }
    }

}
