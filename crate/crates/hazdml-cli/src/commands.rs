//! Subcommand implementations.

use crate::artifacts::{save_json, EstimateFile, ModelFile, NuisanceFile};
use crate::cli::{
    AuditArgs, DebiasArgs, EvidenceArgs, ExperimentArgs, FitArgs, NuisanceArgs, PipelineArgs,
    Route, SimulateArgs,
};
use crate::config::{Config, ModelSection};
use crate::error::{data_io, CliError};
use crate::reports;
use hazdml::crossfit::{
    fit_fold_models, fit_g_per_fold, fold_blocks, tune_zeta_g, tune_zeta_h, FoldModel, FoldPlan,
};
use hazdml::debias::{estimate_latent, estimate_projection, estimate_ratio, DebiasedEstimate};
use hazdml::evidence::{
    fit_model, gaussian_dims, grid_search, time_homogeneity_audit, FitOptions, FittedModel,
    LatentInit,
};
use hazdml::panel::PanelDataset;
use hazdml::sim::{
    beta_to_normalized, replicate_experiment, save_w_sidecar, simulate_1, simulate_2, Dgp,
    EstimatorSpec, ExperimentTable, PipelineSettings, Sim1Config, Sim2Config,
};
use std::path::Path;

fn load_normalized(path: &Path) -> Result<PanelDataset, CliError> {
    let raw = PanelDataset::load(path)?;
    Ok(raw.normalize()?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| data_io(path, e))
}

/// Swaps the anchored latent start in when the model has a frailty block
/// and the config carries a raw-scale anchor.
fn attach_anchor(
    opts: &mut FitOptions,
    anchor: &Option<(f64, Vec<f64>)>,
    latent_cols: Option<&[usize]>,
    ds: &PanelDataset,
) -> Result<(), CliError> {
    if let (Some((kappa, beta_raw)), Some(cols)) = (anchor, latent_cols) {
        if beta_raw.len() != cols.len() + 1 {
            return Err(CliError::Usage(format!(
                "anchor_beta has {} entries; the latent prior needs {} (intercept first)",
                beta_raw.len(),
                cols.len() + 1
            )));
        }
        let norm = ds.normalization().expect("normalized dataset");
        opts.latent_init = LatentInit::Anchored {
            kappa: *kappa,
            beta: beta_to_normalized(beta_raw, norm, cols),
        };
    }
    Ok(())
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse {p:?} as a number")))
        })
        .collect()
}

fn check_folds(n_subjects: usize, folds: usize) -> Result<(), CliError> {
    if folds < 3 {
        return Err(CliError::Usage(format!(
            "cross-fitting needs at least 3 folds, got {folds}"
        )));
    }
    if folds > n_subjects {
        return Err(CliError::Usage(format!(
            "{folds} folds cannot split {n_subjects} subjects"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let theta_star = [1.0, 2.0];
    let base = Sim1Config {
        n_subjects: args.n,
        p2: args.p2,
        seed: args.seed,
        theta_star,
    };
    let sim = match args.dgp {
        1 => {
            if args.kappa.is_some() {
                return Err(CliError::Usage("--kappa only applies to --dgp 2".into()));
            }
            if args.w_sidecar {
                return Err(CliError::Usage(
                    "--w-sidecar only applies to --dgp 2 (cohort 1 has no frailty)".into(),
                ));
            }
            simulate_1(&base)?
        }
        2 => {
            let mut cfg = Sim2Config::default();
            cfg.base = base;
            if let Some(k) = args.kappa {
                cfg.kappa_star = k;
            }
            simulate_2(&cfg)?
        }
        other => return Err(CliError::Usage(format!("--dgp must be 1 or 2, got {other}"))),
    };
    sim.dataset.save(&args.out)?;
    if args.w_sidecar {
        let w = sim.w.as_ref().expect("cohort 2 carries frailty labels");
        save_w_sidecar(&args.out, w).map_err(|e| data_io(&args.out, e))?;
    }
    println!(
        "wrote {}: {} subjects, {} rows, {} events, {} clipped probabilities",
        args.out.display(),
        sim.dataset.n_subjects(),
        sim.dataset.total_rows(),
        sim.dataset.total_events(),
        sim.clipped_probabilities
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn fit_configured(
    cfg: &Config,
    model: &ModelSection,
    ds: &PanelDataset,
) -> Result<(FittedModel, FitOptions), CliError> {
    let mut opts = cfg.fit.to_options();
    let cols = model.latent_prior.as_deref();
    attach_anchor(&mut opts, &cfg.fit.anchor()?, cols, ds)?;
    let kernels = model.kernel_specs()?;
    let rows = ds.flat_rows_all();
    let fit = fit_model(&rows, ds.n_arms(), &kernels, cols, &opts, None)?;
    Ok((fit, opts))
}

fn print_fit(fit: &FittedModel) {
    println!(
        "theta = [{}]  bias = {}  log_bme = {}  converged = {}",
        fit.state
            .theta
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(", "),
        fit.state.bias,
        fit.log_bme,
        fit.converged
    );
    if let Some(l) = &fit.state.latent {
        println!(
            "frailty: kappa = {}  beta = [{}]",
            l.kappa,
            l.beta.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(", ")
        );
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let model = cfg.model()?;
    let ds = load_normalized(&args.data)?;
    model.check_covariates(ds.n_covariates())?;
    let (fit, opts) = fit_configured(&cfg, model, &ds)?;
    print_fit(&fit);
    if let Some(out) = &args.out {
        save_json(out, &ModelFile::new(&ds, &fit, opts.ic_tol))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evidence
// ---------------------------------------------------------------------------

fn search_configured(
    cfg: &Config,
    model: &ModelSection,
    ds: &PanelDataset,
    with_latent: bool,
) -> Result<(hazdml::evidence::GridSearchOutcome, FitOptions), CliError> {
    let search = cfg
        .search
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [search] section".into()))?;
    let grid = search.to_grid()?;
    let template = model.template(with_latent)?;
    let mut opts = cfg.fit.to_options();
    attach_anchor(
        &mut opts,
        &cfg.fit.anchor()?,
        template.latent_prior.as_deref(),
        ds,
    )?;
    let mut grids = std::collections::BTreeMap::new();
    for dim in gaussian_dims(&template) {
        grids.insert(dim, grid.clone());
    }
    if grids.is_empty() {
        return Err(CliError::Usage(
            "the model has no Gaussian components, so there is nothing to search".into(),
        ));
    }
    let outcome = grid_search(ds, &template, &grids, &opts)?;
    Ok((outcome, opts))
}

fn print_search(outcome: &hazdml::evidence::GridSearchOutcome) {
    let best = outcome
        .best_assignment
        .iter()
        .map(|(d, hp)| format!("dim {d}: lambda={} sigma={}", hp.lambda, hp.sigma))
        .collect::<Vec<_>>()
        .join("; ");
    println!(
        "searched {} grid points; best {}  log_bme = {}",
        outcome.trace.len(),
        best,
        outcome.best.log_bme
    );
}

pub fn cmd_evidence(args: &EvidenceArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let model = cfg.model()?;
    let ds = load_normalized(&args.data)?;
    model.check_covariates(ds.n_covariates())?;
    let (outcome, opts) = search_configured(&cfg, model, &ds, model.latent_prior.is_some())?;
    print_search(&outcome);
    print_fit(&outcome.best);
    if let Some(report) = &args.report {
        write_text(report, &reports::evidence_report(&outcome))?;
        println!("wrote {}", report.display());
    }
    if let Some(out) = &args.model_out {
        save_json(out, &ModelFile::new(&ds, &outcome.best, opts.ic_tol))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

pub fn cmd_audit(args: &AuditArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let audit = cfg
        .audit
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [audit] section".into()))?;
    let grid = audit.to_grid()?;
    let ds = load_normalized(&args.data)?;
    let mf = ModelFile::load(&args.model)?;
    let base = mf.rebuild(&ds, &args.model)?;
    let mut opts = cfg.fit.to_options();
    opts.ic_tol = mf.ic_tol;
    attach_anchor(&mut opts, &cfg.fit.anchor()?, base.latent_prior.as_deref(), &ds)?;
    let outcome = time_homogeneity_audit(&ds, &base, ds.n_arms(), &grid, &opts)?;
    println!(
        "time homogeneity violated = {} (base log_bme {}, augmented {})",
        outcome.violated, outcome.base_log_bme, outcome.augmented_log_bme
    );
    if let Some(report) = &args.report {
        write_text(report, &reports::audit_report(&outcome))?;
        println!("wrote {}", report.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// nuisance
// ---------------------------------------------------------------------------

struct NuisanceOutput {
    bundle: NuisanceFile,
    fold_models: Vec<FoldModel>,
}

/// Fits fold models and route-specific nuisances at the given kernels.
/// `theta_full` feeds the latent route's Newton start when already known.
#[allow(clippy::too_many_arguments)]
fn build_nuisance(
    cfg: &Config,
    ds: &PanelDataset,
    route: Route,
    kernels: Vec<hazdml::kernel::KernelSpec>,
    latent_cols: Option<&[usize]>,
    opts: &FitOptions,
    zeta_h_flag: Option<f64>,
    zeta_g_flag: Option<f64>,
    theta_full: Option<Vec<f64>>,
) -> Result<NuisanceOutput, CliError> {
    let nu = &cfg.nuisance;
    check_folds(ds.n_subjects(), nu.folds)?;
    let plan = FoldPlan::new(ds.n_subjects(), nu.folds, nu.fold_seed)?;
    let cols = match route {
        Route::Latent => {
            let c = latent_cols.ok_or_else(|| {
                CliError::Usage("the latent route needs [model] latent_prior in the config".into())
            })?;
            Some(c)
        }
        Route::H | Route::G => None,
    };
    let fold_models = fit_fold_models(ds, &kernels, cols, &plan, opts)?;
    let n_converged = fold_models.iter().filter(|m| m.fit.converged).count();
    println!(
        "fitted {} fold models ({} converged)",
        fold_models.len(),
        n_converged
    );

    let mut bundle = NuisanceFile {
        schema_version: crate::artifacts::ARTIFACT_SCHEMA_VERSION,
        kind: "nuisance".into(),
        route: route.artifact_name().into(),
        panel: crate::artifacts::PanelShape::of(ds),
        ic_tol: opts.ic_tol,
        folds: nu.folds,
        fold_seed: nu.fold_seed,
        kernels,
        latent_prior: cols.map(|c| c.to_vec()),
        fold_states: NuisanceFile::fold_models(&fold_models),
        zeta_h: None,
        g_kernels: None,
        zetas_g: None,
        g_states: None,
        theta_full,
    };

    match route {
        Route::H | Route::Latent => {
            let zeta = match zeta_h_flag {
                Some(z) => {
                    println!("zeta_h = {z} (given)");
                    z
                }
                None => {
                    let blocks: Vec<_> = fold_models
                        .iter()
                        .map(|fm| fold_blocks(ds, &plan, fm, opts.ic_tol))
                        .collect::<Result<_, _>>()?;
                    let curve = tune_zeta_h(&blocks, &nu.zeta_h_grid())?;
                    println!("zeta_h = {} (tuned by cross-validated error)", curve.best_zeta);
                    curve.best_zeta
                }
            };
            bundle.zeta_h = Some(zeta);
        }
        Route::G => {
            let g_kernels = nu.g_kernel_specs()?;
            let zetas: Vec<f64> = match zeta_g_flag {
                Some(z) => {
                    println!("zeta_g = {z} for every arm (given)");
                    vec![z; ds.n_arms()]
                }
                None => {
                    let grid = nu.zeta_g_grid();
                    let mut zetas = Vec::with_capacity(ds.n_arms());
                    for arm in 0..ds.n_arms() {
                        let tuning =
                            tune_zeta_g(ds, &plan, &g_kernels, arm, &grid, &opts.optim, opts.ic_tol)?;
                        // The evidence winner: the cross-validated
                        // calibration bracket is also minimized by
                        // near-constant ratios, which leave the estimate
                        // undebiased.
                        println!(
                            "arm {arm}: zeta_g = {} (evidence), {} (calibration){}",
                            tuning.zeta_by_bme,
                            tuning.zeta_by_cv,
                            if tuning.trivial_risk { ", trivial-solution risk flagged" } else { "" }
                        );
                        zetas.push(tuning.zeta_by_bme);
                    }
                    zetas
                }
            };
            let g_fits = fit_g_per_fold(ds, &plan, &g_kernels, &zetas, &opts.optim, opts.ic_tol)?;
            bundle.g_kernels = Some(g_kernels);
            bundle.zetas_g = Some(zetas);
            bundle.g_states = Some(NuisanceFile::g_fits(&g_fits));
        }
    }
    Ok(NuisanceOutput { bundle, fold_models })
}

pub fn cmd_nuisance(args: &NuisanceArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let model = cfg.model()?;
    let ds = load_normalized(&args.data)?;
    model.check_covariates(ds.n_covariates())?;
    let kernels = model.kernel_specs()?;
    let latent_cols = model.latent_prior.as_deref();
    let mut opts = cfg.fit.to_options();
    if matches!(args.route, Route::Latent) {
        attach_anchor(&mut opts, &cfg.fit.anchor()?, latent_cols, &ds)?;
    }
    // The latent route's downstream Newton step starts from the
    // full-data estimate, so fit it here once.
    let theta_full = match args.route {
        Route::Latent => {
            let (fit, _) = fit_configured(&cfg, model, &ds)?;
            println!("full-data fit:");
            print_fit(&fit);
            Some(fit.state.theta.clone())
        }
        Route::H | Route::G => None,
    };
    let out = build_nuisance(
        &cfg,
        &ds,
        args.route,
        kernels,
        latent_cols,
        &opts,
        args.zeta_h,
        args.zeta_g,
        theta_full,
    )?;
    save_json(&args.out, &out.bundle)?;
    println!("wrote {} ({} folds)", args.out.display(), out.fold_models.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// debias
// ---------------------------------------------------------------------------

fn estimate_from_bundle(
    bundle: &NuisanceFile,
    ds: &PanelDataset,
    bundle_path: &Path,
    theta_init: Option<&[f64]>,
    full_solve: bool,
    theta_star: Option<&[f64]>,
) -> Result<(DebiasedEstimate, &'static str), CliError> {
    let arts = bundle.rebuild(ds, bundle_path)?;
    match bundle.route.as_str() {
        "projection" => Ok((estimate_projection(&arts, theta_star)?, "debias_H")),
        "ratio" => Ok((estimate_ratio(&arts, theta_star)?, "debias_g")),
        "latent" => {
            let init: Vec<f64> = match theta_init {
                Some(t) => t.to_vec(),
                None => bundle.theta_full.clone().ok_or_else(|| {
                    CliError::Usage(
                        "the bundle has no full-data estimate; pass --theta-init".into(),
                    )
                })?,
            };
            if init.len() != ds.n_arms() {
                return Err(CliError::Usage(format!(
                    "theta-init has {} entries for {} arms",
                    init.len(),
                    ds.n_arms()
                )));
            }
            Ok((estimate_latent(&arts, &init, full_solve, theta_star)?, "debias_latent"))
        }
        other => Err(CliError::Data(format!(
            "{}: unknown route {other:?}",
            bundle_path.display()
        ))),
    }
}

fn print_estimate(est: &DebiasedEstimate) {
    for k in 0..est.theta.len() {
        match &est.t_stats {
            Some(t) => println!(
                "arm {k}: theta = {}  se = {}  t = {}",
                est.theta[k], est.se[k], t[k]
            ),
            None => println!("arm {k}: theta = {}  se = {}", est.theta[k], est.se[k]),
        }
    }
}

pub fn cmd_debias(args: &DebiasArgs) -> Result<(), CliError> {
    let bundle = NuisanceFile::load(&args.nuisance)?;
    let ds = load_normalized(&args.data)?;
    let theta_init = args
        .theta_init
        .as_deref()
        .map(|s| parse_f64_list(s, "--theta-init"))
        .transpose()?;
    let theta_star = args
        .theta_star
        .as_deref()
        .map(|s| parse_f64_list(s, "--theta-star"))
        .transpose()?;
    let (est, estimator) = estimate_from_bundle(
        &bundle,
        &ds,
        &args.nuisance,
        theta_init.as_deref(),
        args.full_solve,
        theta_star.as_deref(),
    )?;
    print_estimate(&est);
    if let Some(out) = &args.out {
        save_json(
            out,
            &EstimateFile::new(estimator, &ds, &est, bundle.zeta_h, bundle.zetas_g.clone()),
        )?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let model = cfg.model()?;
    let ds = load_normalized(&args.data)?;
    model.check_covariates(ds.n_covariates())?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| data_io(&args.out_dir, e))?;
    let path = |name: &str| args.out_dir.join(name);
    let with_latent = matches!(args.route, Route::Latent);
    if with_latent && model.latent_prior.is_none() {
        return Err(CliError::Usage(
            "the latent route needs [model] latent_prior in the config".into(),
        ));
    }

    // Stage 1: model building, by evidence search when a grid is
    // configured, at the configured hyperparameters otherwise.
    let stage1 = "stage 1 (model selection)";
    let mut opts = cfg.fit.to_options();
    let latent_cols = if with_latent { model.latent_prior.clone() } else { None };
    attach_anchor(&mut opts, &cfg.fit.anchor()?, latent_cols.as_deref(), &ds)
        .map_err(|e| e.stage(stage1))?;
    let fit: FittedModel = if cfg.search.is_some() {
        let (outcome, _) =
            search_configured(&cfg, model, &ds, with_latent).map_err(|e| e.stage(stage1))?;
        print_search(&outcome);
        write_text(&path("evidence.tsv"), &reports::evidence_report(&outcome))
            .map_err(|e| e.stage(stage1))?;
        outcome.best
    } else {
        let kernels = model.kernel_specs().map_err(|e| e.stage(stage1))?;
        let rows = ds.flat_rows_all();
        fit_model(&rows, ds.n_arms(), &kernels, latent_cols.as_deref(), &opts, None)
            .map_err(|e| CliError::from(e).stage(stage1))?
    };
    print_fit(&fit);
    save_json(&path("model.json"), &ModelFile::new(&ds, &fit, opts.ic_tol))
        .map_err(|e| e.stage(stage1))?;

    // Optional audit of the selected model.
    if let Some(audit) = &cfg.audit {
        let stage = "stage 1 (audit)";
        let grid = audit.to_grid().map_err(|e| e.stage(stage))?;
        let outcome = time_homogeneity_audit(&ds, &fit, ds.n_arms(), &grid, &opts)
            .map_err(|e| CliError::from(e).stage(stage))?;
        println!(
            "time homogeneity violated = {} (base log_bme {}, augmented {})",
            outcome.violated, outcome.base_log_bme, outcome.augmented_log_bme
        );
        write_text(&path("audit.tsv"), &reports::audit_report(&outcome))
            .map_err(|e| e.stage(stage))?;
    }

    // Stage 2: cross-fitted nuisances at the selected kernels.
    let stage2 = "stage 2 (nuisance)";
    let theta_full = with_latent.then(|| fit.state.theta.clone());
    let out = build_nuisance(
        &cfg,
        &ds,
        args.route,
        fit.kernels.clone(),
        latent_cols.as_deref(),
        &opts,
        args.zeta_h,
        args.zeta_g,
        theta_full,
    )
    .map_err(|e| e.stage(stage2))?;
    save_json(&path("nuisance.json"), &out.bundle).map_err(|e| e.stage(stage2))?;

    // Stage 3: debiased solve with sandwich uncertainty.
    let stage3 = "stage 3 (debias)";
    let theta_star = args
        .theta_star
        .as_deref()
        .map(|s| parse_f64_list(s, "--theta-star"))
        .transpose()
        .map_err(|e| e.stage(stage3))?;
    let (est, estimator) = estimate_from_bundle(
        &out.bundle,
        &ds,
        &path("nuisance.json"),
        None,
        args.full_solve,
        theta_star.as_deref(),
    )
    .map_err(|e| e.stage(stage3))?;
    print_estimate(&est);
    save_json(
        &path("estimate.json"),
        &EstimateFile::new(estimator, &ds, &est, out.bundle.zeta_h, out.bundle.zetas_g.clone()),
    )
    .map_err(|e| e.stage(stage3))?;
    println!("wrote {}", args.out_dir.join("estimate.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

fn parse_estimator(name: &str, full_solve: bool) -> Result<EstimatorSpec, CliError> {
    match name.trim() {
        "naive_ml" => Ok(EstimatorSpec::NaiveMl),
        "debias_h" | "debias_H" => Ok(EstimatorSpec::DebiasH),
        "debias_g" => Ok(EstimatorSpec::DebiasG),
        "debias_latent" => Ok(EstimatorSpec::DebiasLatent { full_solve }),
        other => Err(CliError::Usage(format!(
            "unknown estimator {other:?} (expected naive_ml, debias_H, debias_g, or debias_latent)"
        ))),
    }
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let cfg = Config::load(&args.config)?;
    let exp = cfg.experiment()?;
    let n = args.n.unwrap_or(exp.n);
    let seed = args.seed.unwrap_or(exp.seed);
    let replicates = args.replicates.unwrap_or(exp.replicates);
    if replicates == 0 {
        return Err(CliError::Usage("--replicates must be positive".into()));
    }
    let p2 = exp.p2.unwrap_or(0.5);
    let full_solve = exp.full_solve.unwrap_or(false);
    let estimator_names: Vec<String> = match &args.estimators {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => exp.estimators.clone(),
    };
    if estimator_names.is_empty() {
        return Err(CliError::Usage("no estimators requested".into()));
    }
    let specs: Vec<EstimatorSpec> = estimator_names
        .iter()
        .map(|n| parse_estimator(n, full_solve))
        .collect::<Result<_, _>>()?;

    let base = Sim1Config { n_subjects: n, p2, seed, theta_star: [1.0, 2.0] };
    let (dgp, mut settings) = match exp.dgp {
        1 => (Dgp::One(base), PipelineSettings::first_cohort()),
        2 => {
            let kappa = exp.kappa.unwrap_or(1.0);
            let mut cfg2 = Sim2Config::default();
            cfg2.base = base;
            cfg2.kappa_star = kappa;
            (Dgp::Two(cfg2), PipelineSettings::second_cohort(kappa))
        }
        other => return Err(CliError::Usage(format!("dgp must be 1 or 2, got {other}"))),
    };
    if exp.dgp == 1 && specs.iter().any(|s| matches!(s, EstimatorSpec::DebiasLatent { .. })) {
        return Err(CliError::Usage(
            "debias_latent needs the second cohort (dgp = 2)".into(),
        ));
    }
    settings.n_folds = cfg.nuisance.folds;
    settings.fold_seed = cfg.nuisance.fold_seed;
    if let Some(grid) = &cfg.nuisance.zeta_h_grid {
        settings.zeta_h_grid = grid.clone();
    }
    if let Some(grid) = &cfg.nuisance.zeta_g_grid {
        settings.zeta_g_grid = grid.clone();
    }
    if !exp.hyper_search.unwrap_or(true) {
        settings.hyper_search = None;
    }
    check_folds(n, settings.n_folds)?;

    let mut header: Vec<(String, String)> = vec![
        ("dgp".into(), exp.dgp.to_string()),
        ("n".into(), n.to_string()),
        ("p2".into(), p2.to_string()),
        ("seed".into(), seed.to_string()),
        ("replicates".into(), replicates.to_string()),
        ("estimators".into(), estimator_names.join(",")),
        ("folds".into(), settings.n_folds.to_string()),
        (
            "hyper_search".into(),
            settings.hyper_search.is_some().to_string(),
        ),
    ];
    if exp.dgp == 2 {
        header.insert(3, ("kappa".into(), exp.kappa.unwrap_or(1.0).to_string()));
    }
    for (k, v) in &header {
        println!("{k} = {v}");
    }

    let mut tables: Vec<ExperimentTable> = Vec::with_capacity(specs.len());
    for spec in &specs {
        println!("running {} x {replicates} replicates...", spec.name());
        let table = replicate_experiment(&dgp, replicates, *spec, &settings);
        if table.rows.is_empty() {
            let detail = table
                .failures
                .first()
                .map(|(r, e)| format!("replicate {r}: {e}"))
                .unwrap_or_default();
            return Err(CliError::Numeric(format!(
                "every {} replicate failed ({detail})",
                table.estimator
            )));
        }
        for (r, e) in &table.failures {
            eprintln!("warning: {} replicate {r} failed: {e}", table.estimator);
        }
        for k in 0..settings.theta_star.len() {
            println!(
                "  arm {k}: mean t = {}  std t = {}",
                table.mean_t[k], table.std_t[k]
            );
        }
        tables.push(table);
    }

    let n_arms = settings.theta_star.len();
    std::fs::create_dir_all(&args.out_dir).map_err(|e| data_io(&args.out_dir, e))?;
    let summary = reports::experiment_summary(&header, &tables, n_arms);
    write_text(&args.out_dir.join("summary.tsv"), &summary)?;
    write_text(
        &args.out_dir.join("replicates.tsv"),
        &reports::experiment_replicates(&tables, n_arms),
    )?;
    let (lo, hi, bins) = (
        exp.hist_lo.unwrap_or(-4.0),
        exp.hist_hi.unwrap_or(4.0),
        exp.hist_bins.unwrap_or(16),
    );
    if !(hi > lo) || bins == 0 {
        return Err(CliError::Usage("histogram range or bin count is degenerate".into()));
    }
    write_text(
        &args.out_dir.join("t_histogram.tsv"),
        &reports::experiment_histogram(&tables, n_arms, lo, hi, bins),
    )?;
    println!(
        "wrote {}, {}, {}",
        args.out_dir.join("summary.tsv").display(),
        args.out_dir.join("replicates.tsv").display(),
        args.out_dir.join("t_histogram.tsv").display()
    );
    Ok(())
}
