//! Tab-separated report files.
//!
//! Reports are plain text: `#`-prefixed header lines carry run-level
//! facts, one tab-separated table follows. Floats print in shortest
//! round-trip form so downstream tools can parse them losslessly.

use hazdml::evidence::{AuditOutcome, GridPoint, GridSearchOutcome};
use hazdml::sim::ExperimentTable;
use std::fmt::Write as _;

fn grid_rows(out: &mut String, trace: &[GridPoint]) {
    out.push_str("dim\tlambda\tsigma\tlog_bme\tvalue\tconverged\n");
    for p in trace {
        for (dim, hp) in &p.assignment {
            let _ = writeln!(
                out,
                "{dim}\t{}\t{}\t{}\t{}\t{}",
                hp.lambda, hp.sigma, p.log_bme, p.value, p.converged
            );
        }
    }
}

/// Evidence-search trace with the winning assignment in the header.
pub fn evidence_report(outcome: &GridSearchOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# grid points\t{}", outcome.trace.len());
    for (dim, hp) in &outcome.best_assignment {
        let _ = writeln!(out, "# best dim {dim}\tlambda={}\tsigma={}", hp.lambda, hp.sigma);
    }
    let _ = writeln!(out, "# best log_bme\t{}", outcome.best.log_bme);
    let _ = writeln!(out, "# converged\t{}", outcome.best.converged);
    grid_rows(&mut out, &outcome.trace);
    out
}

/// Time-homogeneity audit verdict and trace.
pub fn audit_report(outcome: &AuditOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# base log_bme\t{}", outcome.base_log_bme);
    let _ = writeln!(out, "# augmented log_bme\t{}", outcome.augmented_log_bme);
    let _ = writeln!(out, "# violated\t{}", outcome.violated);
    grid_rows(&mut out, &outcome.trace);
    out
}

/// One summary row per estimator: estimate moments and `t`-statistic
/// calibration per arm, plus the failure count.
pub fn experiment_summary(
    header: &[(String, String)],
    tables: &[ExperimentTable],
    n_arms: usize,
) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k}\t{v}");
    }
    out.push_str("estimator\treplicates_ok\treplicates_failed");
    for k in 0..n_arms {
        let _ = write!(out, "\tmean_theta{k}\tmean_t{k}\tstd_t{k}");
    }
    out.push('\n');
    for t in tables {
        let _ = write!(out, "{}\t{}\t{}", t.estimator, t.rows.len(), t.failures.len());
        for k in 0..n_arms {
            let mean_theta = if t.rows.is_empty() {
                f64::NAN
            } else {
                t.rows.iter().map(|r| r.theta[k]).sum::<f64>() / t.rows.len() as f64
            };
            let _ = write!(out, "\t{}\t{}\t{}", mean_theta, t.mean_t[k], t.std_t[k]);
        }
        out.push('\n');
    }
    out
}

/// Every replicate of every estimator, one row per arm.
pub fn experiment_replicates(tables: &[ExperimentTable], n_arms: usize) -> String {
    let mut out = String::from("estimator\treplicate\tarm\ttheta\tse\tt\n");
    for t in tables {
        for row in &t.rows {
            for k in 0..n_arms {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    t.estimator, row.replicate, k, row.theta[k], row.se[k], row.t[k]
                );
            }
        }
        for (rep, err) in &t.failures {
            let _ = writeln!(out, "# {} replicate {rep} failed\t{err}", t.estimator);
        }
    }
    out
}

/// Histogram of per-replicate `t`-statistics, one table per estimator
/// and arm; values beyond the range land in the edge bins.
pub fn experiment_histogram(
    tables: &[ExperimentTable],
    n_arms: usize,
    lo: f64,
    hi: f64,
    n_bins: usize,
) -> String {
    let mut out = String::from("estimator\tarm\tbin_lo\tbin_hi\tcount\n");
    let width = (hi - lo) / n_bins as f64;
    for t in tables {
        for k in 0..n_arms {
            for (b, count) in t.t_histogram(k, lo, hi, n_bins).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{}\t{k}\t{}\t{}\t{count}",
                    t.estimator,
                    lo + b as f64 * width,
                    lo + (b + 1) as f64 * width
                );
            }
        }
    }
    out
}
