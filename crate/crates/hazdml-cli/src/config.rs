//! Versioned TOML run configuration.
//!
//! One file drives every subcommand; each command reads only the sections
//! it needs, and command-line flags override individual values. Unknown
//! keys are rejected so typos surface as usage errors instead of silently
//! falling back to defaults.

use crate::error::CliError;
use hazdml::evidence::{FitOptions, HyperGrid, KernelTemplate, LatentInit, ModelTemplate};
use hazdml::kernel::{KernelKind, KernelSpec};
use serde::Deserialize;
use std::path::Path;

/// Highest config schema this binary understands.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub fit: FitSection,
    pub search: Option<GridSection>,
    pub audit: Option<GridSection>,
    #[serde(default)]
    pub nuisance: NuisanceSection,
    pub experiment: Option<ExperimentSection>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "config {}: schema_version {} unsupported (this build reads version {})",
                path.display(),
                cfg.schema_version,
                CONFIG_SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }

    /// The `[model]` section, required by the model-building commands.
    pub fn model(&self) -> Result<&ModelSection, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no [model] section".into()))
    }

    /// The `[experiment]` section, required by `experiment`.
    pub fn experiment(&self) -> Result<&ExperimentSection, CliError> {
        self.experiment
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no [experiment] section".into()))
    }
}

/// Outcome-model shape: kernel components and the optional frailty prior.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kernels: Vec<KernelEntry>,
    pub latent_prior: Option<Vec<usize>>,
}

/// One kernel component. Gaussian components need `sigma` and `lambda`;
/// linear components take neither (their prior is flat).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub kind: String,
    pub covariates: Vec<usize>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
}

impl KernelEntry {
    pub fn to_spec(&self) -> Result<KernelSpec, CliError> {
        if self.covariates.is_empty() {
            return Err(CliError::Usage("kernel entry has no covariates".into()));
        }
        match self.kind.as_str() {
            "linear" => {
                if self.covariates.len() != 1 {
                    return Err(CliError::Usage(
                        "linear kernel entries take exactly one covariate".into(),
                    ));
                }
                Ok(KernelSpec::linear(self.covariates[0]))
            }
            "gaussian" => {
                let sigma = self.sigma.ok_or_else(|| {
                    CliError::Usage("gaussian kernel entry is missing `sigma`".into())
                })?;
                let lambda = self.lambda.ok_or_else(|| {
                    CliError::Usage("gaussian kernel entry is missing `lambda`".into())
                })?;
                Ok(KernelSpec::gaussian(&self.covariates, sigma, lambda))
            }
            other => Err(CliError::Usage(format!(
                "unknown kernel kind {other:?} (expected \"linear\" or \"gaussian\")"
            ))),
        }
    }

    fn to_template(&self) -> Result<KernelTemplate, CliError> {
        // Validate the entry; hyperparameters are ignored by the template.
        let spec = self.to_spec()?;
        Ok(match spec.kind {
            KernelKind::Linear => KernelTemplate::linear(spec.covariate_indices[0]),
            KernelKind::Gaussian => KernelTemplate::gaussian(&spec.covariate_indices),
        })
    }
}

impl ModelSection {
    pub fn kernel_specs(&self) -> Result<Vec<KernelSpec>, CliError> {
        self.kernels.iter().map(KernelEntry::to_spec).collect()
    }

    /// Search template over the same components, with or without the
    /// frailty block.
    pub fn template(&self, with_latent: bool) -> Result<ModelTemplate, CliError> {
        let kernels: Vec<KernelTemplate> =
            self.kernels.iter().map(KernelEntry::to_template).collect::<Result<_, _>>()?;
        Ok(ModelTemplate {
            kernels,
            latent_prior: if with_latent { self.latent_prior.clone() } else { None },
        })
    }

    /// Rejects covariate indices beyond the panel's width.
    pub fn check_covariates(&self, n_covariates: usize) -> Result<(), CliError> {
        let beyond = self
            .kernels
            .iter()
            .flat_map(|k| k.covariates.iter())
            .chain(self.latent_prior.iter().flatten())
            .find(|c| **c >= n_covariates);
        match beyond {
            Some(c) => Err(CliError::Usage(format!(
                "covariate index {c} out of range: the panel has {n_covariates} covariates"
            ))),
            None => Ok(()),
        }
    }
}

/// Optimizer and EM settings; anything omitted keeps the library default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub eps_stop: Option<f64>,
    pub max_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub em_max_iters: Option<usize>,
    pub ic_tol: Option<f64>,
    /// Raw-scale frailty anchor, paired with `anchor_beta`.
    pub anchor_kappa: Option<f64>,
    /// Raw-scale prior coefficients, intercept first.
    pub anchor_beta: Option<Vec<f64>>,
    pub random_starts: Option<usize>,
    pub random_seed: Option<u64>,
}

impl FitSection {
    /// Fit options before any anchor conversion (the anchor needs the
    /// dataset's normalization, so commands attach it separately).
    pub fn to_options(&self) -> FitOptions {
        let mut opts = FitOptions::default();
        if let Some(e) = self.eps_stop {
            opts.optim.eps_stop = e;
            opts.em.optim.eps_stop = e;
        }
        if let Some(m) = self.max_iters {
            opts.optim.max_iters = m;
            opts.em.optim.max_iters = m;
        }
        if let Some(t) = self.em_tol {
            opts.em.tol = t;
        }
        if let Some(m) = self.em_max_iters {
            opts.em.max_iters = m;
        }
        if let Some(t) = self.ic_tol {
            opts.ic_tol = t;
        }
        if let (Some(n), seed) = (self.random_starts, self.random_seed.unwrap_or(17)) {
            opts.latent_init = LatentInit::Random { n_starts: n, seed };
        }
        opts
    }

    /// Raw-scale `(kappa, beta)` anchor, when both halves are present.
    pub fn anchor(&self) -> Result<Option<(f64, Vec<f64>)>, CliError> {
        match (self.anchor_kappa, &self.anchor_beta) {
            (Some(k), Some(b)) => Ok(Some((k, b.clone()))),
            (None, None) => Ok(None),
            _ => Err(CliError::Usage(
                "anchor_kappa and anchor_beta must be given together".into(),
            )),
        }
    }
}

/// A `(lambda, sigma)` product grid.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl GridSection {
    pub fn to_grid(&self) -> Result<HyperGrid, CliError> {
        if self.lambdas.is_empty() || self.sigmas.is_empty() {
            return Err(CliError::Usage("hyperparameter grid has an empty axis".into()));
        }
        Ok(HyperGrid { lambdas: self.lambdas.clone(), sigmas: self.sigmas.clone() })
    }
}

/// Cross-fitting layout and ridge grids for the nuisance stage.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceSection {
    pub folds: usize,
    pub fold_seed: u64,
    /// Projection-route ridge grid; the library default spans
    /// `1e-3..100` in a 1-2-3-5-7 pattern.
    pub zeta_h_grid: Option<Vec<f64>>,
    /// Ratio-route ridge grid; the library default spans `0.1..10`.
    pub zeta_g_grid: Option<Vec<f64>>,
    /// Treatment-model kernels (ratio route only).
    pub g_kernels: Option<Vec<KernelEntry>>,
}

impl Default for NuisanceSection {
    fn default() -> Self {
        NuisanceSection {
            folds: 5,
            fold_seed: 202,
            zeta_h_grid: None,
            zeta_g_grid: None,
            g_kernels: None,
        }
    }
}

impl NuisanceSection {
    pub fn zeta_h_grid(&self) -> Vec<f64> {
        self.zeta_h_grid.clone().unwrap_or_else(|| hazdml::evidence::grid_ln15(1e-3, 100.0))
    }

    pub fn zeta_g_grid(&self) -> Vec<f64> {
        self.zeta_g_grid.clone().unwrap_or_else(|| hazdml::evidence::grid_ln15(0.1, 10.0))
    }

    pub fn g_kernel_specs(&self) -> Result<Vec<KernelSpec>, CliError> {
        let entries = self.g_kernels.as_ref().ok_or_else(|| {
            CliError::Usage("the ratio route needs [nuisance] g_kernels in the config".into())
        })?;
        entries.iter().map(KernelEntry::to_spec).collect()
    }
}

/// Replicated simulation experiment: generator, size, and estimator list.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub dgp: u8,
    pub n: usize,
    pub seed: u64,
    pub replicates: u64,
    pub estimators: Vec<String>,
    pub p2: Option<f64>,
    /// Frailty log hazard ratio of the second cohort.
    pub kappa: Option<f64>,
    /// Per-replicate evidence search (on by default).
    pub hyper_search: Option<bool>,
    /// Solve the latent-route equation exactly instead of one Newton step.
    pub full_solve: Option<bool>,
    pub hist_lo: Option<f64>,
    pub hist_hi: Option<f64>,
    pub hist_bins: Option<usize>,
}
