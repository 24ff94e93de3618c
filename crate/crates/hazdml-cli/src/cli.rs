//! Command-line surface.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "hazdml",
    version,
    about = "Debiased hazard-ratio estimation under kernel-based covariate adjustment",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure."
)]
pub struct Cli {
    /// Worker threads (default: the HAZDML_THREADS variable, else all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic cohort and write it as a panel file.
    Simulate(SimulateArgs),
    /// Fit the configured model on a panel.
    Fit(FitArgs),
    /// Evidence-driven hyperparameter search.
    Evidence(EvidenceArgs),
    /// Audit a fitted model for time-homogeneity violations.
    Audit(AuditArgs),
    /// Cross-fitted nuisance estimation for one debiasing route.
    Nuisance(NuisanceArgs),
    /// Debiased solve from a nuisance bundle.
    Debias(DebiasArgs),
    /// Full run: model selection, audit, nuisances, debiased solve.
    Pipeline(PipelineArgs),
    /// Replicated simulation experiment over one or more estimators.
    Experiment(ExperimentArgs),
}

/// Debiasing route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Route {
    /// Projection of the treatment score onto the adjustment score.
    H,
    /// Treatment-density ratio weighting.
    G,
    /// Projection route on the latent-frailty model.
    Latent,
}

impl Route {
    pub fn artifact_name(self) -> &'static str {
        match self {
            Route::H => "projection",
            Route::G => "ratio",
            Route::Latent => "latent",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generator: 1 (observed confounding) or 2 (adds tests and frailty).
    #[arg(long)]
    pub dgp: u8,
    /// Number of subjects.
    #[arg(long)]
    pub n: usize,
    /// Random seed (required: runs must be reproducible).
    #[arg(long)]
    pub seed: u64,
    /// Weight of the condition-2 term in the outcome rate.
    #[arg(long, default_value_t = 0.5)]
    pub p2: f64,
    /// Frailty log hazard ratio (second cohort only).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Output panel path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the hidden frailty labels next to the panel
    /// (oracle diagnostics only; second cohort only).
    #[arg(long)]
    pub w_sidecar: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Panel file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Write the fitted model here (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvidenceArgs {
    /// Panel file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML) with a [search] grid.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the search trace here (TSV).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the winning model here (JSON).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Panel file the model was fitted on.
    #[arg(long)]
    pub data: PathBuf,
    /// Fitted model (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Run configuration (TOML) with an [audit] grid.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the audit trace here (TSV).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NuisanceArgs {
    /// Panel file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Debiasing route the nuisances serve.
    #[arg(long, value_enum)]
    pub route: Route,
    /// Projection ridge; skips tuning when given.
    #[arg(long)]
    pub zeta_h: Option<f64>,
    /// Ratio ridge, applied to every arm; skips tuning when given.
    #[arg(long)]
    pub zeta_g: Option<f64>,
    /// Output bundle path (JSON).
    #[arg(long, default_value = "nuisance.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DebiasArgs {
    /// Panel file the bundle was built from.
    #[arg(long)]
    pub data: PathBuf,
    /// Nuisance bundle (JSON).
    #[arg(long)]
    pub nuisance: PathBuf,
    /// Newton start for the latent route, comma-separated
    /// (default: the bundle's full-data estimate).
    #[arg(long)]
    pub theta_init: Option<String>,
    /// Solve the latent-route equation exactly instead of one Newton step.
    #[arg(long)]
    pub full_solve: bool,
    /// Reference values for t-statistics, comma-separated.
    #[arg(long)]
    pub theta_star: Option<String>,
    /// Write the estimate here (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Panel file.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Debiasing route.
    #[arg(long, value_enum)]
    pub route: Route,
    /// Directory for every artifact and report.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Projection ridge; skips tuning when given.
    #[arg(long)]
    pub zeta_h: Option<f64>,
    /// Ratio ridge, applied to every arm; skips tuning when given.
    #[arg(long)]
    pub zeta_g: Option<f64>,
    /// Solve the latent-route equation exactly instead of one Newton step.
    #[arg(long)]
    pub full_solve: bool,
    /// Reference values for t-statistics, comma-separated.
    #[arg(long)]
    pub theta_star: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Run configuration (TOML) with an [experiment] section.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for the summary, replicate, and histogram reports.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Override the configured replicate count.
    #[arg(long)]
    pub replicates: Option<u64>,
    /// Override the configured subjects per replicate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Override the configured base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured estimator list (comma-separated).
    #[arg(long)]
    pub estimators: Option<String>,
}
