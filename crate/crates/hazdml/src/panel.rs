//! Panel data model for discretized survival histories.
//!
//! A subject's history is a sequence of timesteps on a uniform grid of
//! spacing `dt` (years). Each step carries the treatment indicators and
//! covariate values in force over `[t, t + dt)`. The final step is the one
//! containing `min(event_time, censor_time)`; an event occurring exactly on
//! a grid point belongs to the interval that starts there.
//!
//! Datasets are immutable after construction: fitting code never mutates
//! panels, so fold subsets can share the same normalization statistics and
//! replicated runs are reproducible.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write as _};
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

/// Tolerance used when mapping times onto the step grid, as a fraction of
/// `dt`. Guards against times stored as `k * dt` with rounding error.
const GRID_EPS: f64 = 1.0e-9;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("subject {subject}: {msg}")]
    Subject { subject: u64, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("covariate {0} has zero variance; cannot normalize")]
    ZeroVariance(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps a time in years to its step index on the grid of spacing `dt`.
pub fn step_of_time(t: f64, dt: f64) -> usize {
    ((t / dt) + GRID_EPS).floor() as usize
}

/// One subject's observed history.
#[derive(Debug, Clone)]
pub struct SubjectPanel {
    pub subject_id: u64,
    /// Administrative censoring time in years.
    pub censor_time: f64,
    /// Event time in years, when an event was observed (`<= censor_time`).
    pub event_time: Option<f64>,
    /// Active treatment arm per step (`None` = untreated). At most one arm
    /// is active in any step.
    pub arm: Vec<Option<usize>>,
    /// Covariate rows, one per step, shape `(steps, n_covariates)`.
    pub x: Array2<f64>,
}

impl SubjectPanel {
    pub fn n_steps(&self) -> usize {
        self.arm.len()
    }

    /// Index of the step containing the event, if any.
    pub fn event_step(&self, dt: f64) -> Option<usize> {
        self.event_time.map(|t| step_of_time(t, dt))
    }

    /// End of follow-up: event time when observed, censoring time otherwise.
    pub fn followup_end(&self) -> f64 {
        match self.event_time {
            Some(t) => t.min(self.censor_time),
            None => self.censor_time,
        }
    }

    fn validate(&self, dt: f64, n_arms: usize, n_covariates: usize) -> Result<(), PanelError> {
        let fail = |msg: String| Err(PanelError::Subject { subject: self.subject_id, msg });
        if self.censor_time < 0.0 || !self.censor_time.is_finite() {
            return fail(format!("censor time {} is not a non-negative real", self.censor_time));
        }
        if let Some(t) = self.event_time {
            if !(0.0..=self.censor_time + GRID_EPS * dt).contains(&t) {
                return fail(format!(
                    "event time {t} outside [0, censor time {}]",
                    self.censor_time
                ));
            }
        }
        let expect = step_of_time(self.followup_end(), dt) + 1;
        if self.n_steps() != expect {
            return fail(format!(
                "has {} steps but follow-up through {} requires exactly {expect}",
                self.n_steps(),
                self.followup_end()
            ));
        }
        if self.x.nrows() != self.n_steps() {
            return fail(format!(
                "covariate rows {} do not match {} steps",
                self.x.nrows(),
                self.n_steps()
            ));
        }
        if self.x.ncols() != n_covariates {
            return fail(format!(
                "has {} covariates, dataset declares {n_covariates}",
                self.x.ncols()
            ));
        }
        for (s, a) in self.arm.iter().enumerate() {
            if let Some(k) = a {
                if *k >= n_arms {
                    return fail(format!("step {s} references arm {k} of {n_arms}"));
                }
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return fail("covariates contain a non-finite value".into());
        }
        Ok(())
    }
}

/// Covariate standardization statistics (mean zero, unit population
/// variance, pooled over every timestep row of the data they were fitted
/// on).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// An immutable collection of subject panels on a shared grid.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    subjects: Vec<SubjectPanel>,
    dt: f64,
    n_arms: usize,
    n_covariates: usize,
    /// Statistics already applied to the stored covariates, if any.
    normalization: Option<Normalization>,
}

/// Flattened row view of a subset of subjects, used to build kernel
/// matrices and likelihood designs. Row order is subjects in the order
/// given, steps in time order within each subject.
#[derive(Debug, Clone)]
pub struct FlatRows {
    /// Covariates, shape `(rows, n_covariates)`.
    pub x: Array2<f64>,
    /// Elapsed time of each row's step, in years.
    pub t: Array1<f64>,
    /// Active arm per row.
    pub arm: Vec<Option<usize>>,
    /// True on the row of the step containing the subject's event.
    pub event: Vec<bool>,
    /// Half-open row range of each subject, in the subset's order.
    pub subject_rows: Vec<Range<usize>>,
    /// Dataset-level index of each subject in the subset's order.
    pub subject_index: Vec<usize>,
}

impl PanelDataset {
    pub fn new(
        subjects: Vec<SubjectPanel>,
        dt: f64,
        n_arms: usize,
        n_covariates: usize,
        normalization: Option<Normalization>,
    ) -> Result<Self, PanelError> {
        if !(dt > 0.0) {
            return Err(PanelError::Dataset(format!("step width dt = {dt} must be positive")));
        }
        if subjects.is_empty() {
            return Err(PanelError::Dataset("dataset has no subjects".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            s.validate(dt, n_arms, n_covariates)?;
            if !seen.insert(s.subject_id) {
                return Err(PanelError::Dataset(format!(
                    "duplicate subject id {}",
                    s.subject_id
                )));
            }
        }
        if let Some(nm) = &normalization {
            if nm.means.len() != n_covariates || nm.stds.len() != n_covariates {
                return Err(PanelError::Dataset(
                    "normalization statistics do not match covariate count".into(),
                ));
            }
        }
        Ok(PanelDataset { subjects, dt, n_arms, n_covariates, normalization })
    }

    pub fn subjects(&self) -> &[SubjectPanel] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn total_rows(&self) -> usize {
        self.subjects.iter().map(|s| s.n_steps()).sum()
    }

    pub fn total_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event_time.is_some()).count()
    }

    /// Flattens the given subjects (by dataset index) into row form.
    pub fn flat_rows(&self, subject_indices: &[usize]) -> FlatRows {
        let total: usize = subject_indices.iter().map(|&i| self.subjects[i].n_steps()).sum();
        let mut x = Array2::<f64>::zeros((total, self.n_covariates));
        let mut t = Array1::<f64>::zeros(total);
        let mut arm = Vec::with_capacity(total);
        let mut event = vec![false; total];
        let mut subject_rows = Vec::with_capacity(subject_indices.len());
        let mut cursor = 0usize;
        for &si in subject_indices {
            let s = &self.subjects[si];
            let start = cursor;
            for step in 0..s.n_steps() {
                x.row_mut(cursor).assign(&s.x.row(step));
                t[cursor] = step as f64 * self.dt;
                arm.push(s.arm[step]);
                cursor += 1;
            }
            if let Some(es) = s.event_step(self.dt) {
                event[start + es] = true;
            }
            subject_rows.push(start..cursor);
        }
        FlatRows { x, t, arm, event, subject_rows, subject_index: subject_indices.to_vec() }
    }

    /// All subjects in dataset order.
    pub fn flat_rows_all(&self) -> FlatRows {
        let idx: Vec<usize> = (0..self.n_subjects()).collect();
        self.flat_rows(&idx)
    }

    /// A new dataset holding clones of the chosen subjects. The subset
    /// inherits the parent's grid and normalization statistics.
    pub fn subset(&self, subject_indices: &[usize]) -> Result<PanelDataset, PanelError> {
        let subjects: Vec<SubjectPanel> =
            subject_indices.iter().map(|&i| self.subjects[i].clone()).collect();
        PanelDataset::new(
            subjects,
            self.dt,
            self.n_arms,
            self.n_covariates,
            self.normalization.clone(),
        )
    }

    /// Subject-level bootstrap resample of the same size, drawn with
    /// replacement. Resampled subjects are renumbered `0..n` so that ids
    /// stay unique.
    pub fn bootstrap_resample(&self, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_subjects();
        let mut subjects = Vec::with_capacity(n);
        for new_id in 0..n {
            let pick = rng.random_range(0..n);
            let mut s = self.subjects[pick].clone();
            s.subject_id = new_id as u64;
            subjects.push(s);
        }
        PanelDataset {
            subjects,
            dt: self.dt,
            n_arms: self.n_arms,
            n_covariates: self.n_covariates,
            normalization: self.normalization.clone(),
        }
    }

    /// Computes standardization statistics over all timestep rows and
    /// returns the normalized dataset. Population (not sample) variance is
    /// used, matching the convention that a two-row column `[0, 2]`
    /// normalizes to `[-1, 1]`.
    pub fn normalize(&self) -> Result<PanelDataset, PanelError> {
        let rows = self.total_rows() as f64;
        let d = self.n_covariates;
        let mut means = vec![0.0; d];
        for s in &self.subjects {
            for r in s.x.rows() {
                for (j, v) in r.iter().enumerate() {
                    means[j] += v;
                }
            }
        }
        for m in means.iter_mut() {
            *m /= rows;
        }
        let mut vars = vec![0.0; d];
        for s in &self.subjects {
            for r in s.x.rows() {
                for (j, v) in r.iter().enumerate() {
                    vars[j] += (v - means[j]) * (v - means[j]);
                }
            }
        }
        let mut stds = vec![0.0; d];
        for (j, v) in vars.iter().enumerate() {
            let var = v / rows;
            if var <= 0.0 {
                return Err(PanelError::ZeroVariance(j));
            }
            stds[j] = var.sqrt();
        }
        let norm = Normalization { means, stds };
        self.apply_normalization(&norm)
    }

    /// Applies previously fitted statistics, e.g. to held-out data. The
    /// result's stored statistics are the applied ones, so saving and
    /// reloading keeps the provenance of the transform.
    pub fn apply_normalization(&self, norm: &Normalization) -> Result<PanelDataset, PanelError> {
        if norm.means.len() != self.n_covariates {
            return Err(PanelError::Dataset(
                "normalization statistics do not match covariate count".into(),
            ));
        }
        let mut subjects = self.subjects.clone();
        for s in subjects.iter_mut() {
            for mut r in s.x.rows_mut() {
                for (j, v) in r.iter_mut().enumerate() {
                    *v = (*v - norm.means[j]) / norm.stds[j];
                }
            }
        }
        Ok(PanelDataset {
            subjects,
            dt: self.dt,
            n_arms: self.n_arms,
            n_covariates: self.n_covariates,
            normalization: Some(norm.clone()),
        })
    }

    /// Returns a dataset with one extra covariate column holding each
    /// step's elapsed time. When the dataset is normalized the new column
    /// is standardized over all rows as well, so kernel bandwidths remain
    /// comparable across columns.
    pub fn with_elapsed_time_covariate(&self) -> Result<PanelDataset, PanelError> {
        let mut subjects = Vec::with_capacity(self.n_subjects());
        for s in &self.subjects {
            let steps = s.n_steps();
            let mut x = Array2::<f64>::zeros((steps, self.n_covariates + 1));
            for step in 0..steps {
                for j in 0..self.n_covariates {
                    x[[step, j]] = s.x[[step, j]];
                }
                x[[step, self.n_covariates]] = step as f64 * self.dt;
            }
            subjects.push(SubjectPanel {
                subject_id: s.subject_id,
                censor_time: s.censor_time,
                event_time: s.event_time,
                arm: s.arm.clone(),
                x,
            });
        }
        let mut ds = PanelDataset {
            subjects,
            dt: self.dt,
            n_arms: self.n_arms,
            n_covariates: self.n_covariates + 1,
            normalization: None,
        };
        if let Some(norm) = &self.normalization {
            // Standardize only the appended column; the others already
            // carry the stored transform.
            let rows = ds.total_rows() as f64;
            let j = self.n_covariates;
            let mut mean = 0.0;
            for s in &ds.subjects {
                for r in s.x.rows() {
                    mean += r[j];
                }
            }
            mean /= rows;
            let mut var = 0.0;
            for s in &ds.subjects {
                for r in s.x.rows() {
                    var += (r[j] - mean) * (r[j] - mean);
                }
            }
            var /= rows;
            if var <= 0.0 {
                return Err(PanelError::ZeroVariance(j));
            }
            let std = var.sqrt();
            for s in ds.subjects.iter_mut() {
                for mut r in s.x.rows_mut() {
                    r[j] = (r[j] - mean) / std;
                }
            }
            let mut means = norm.means.clone();
            let mut stds = norm.stds.clone();
            means.push(mean);
            stds.push(std);
            ds.normalization = Some(Normalization { means, stds });
        }
        Ok(ds)
    }

    /// Serializes the dataset in the line-oriented panel text format (see
    /// the README for the column order). Output is deterministic: floats
    /// are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("#hazdml-panel v1\n");
        let _ = writeln!(out, "#dt {}", self.dt);
        let _ = writeln!(out, "#arms {}", self.n_arms);
        let _ = writeln!(out, "#covariates {}", self.n_covariates);
        if let Some(norm) = &self.normalization {
            out.push_str("#norm-mean");
            for v in &norm.means {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
            out.push_str("#norm-std");
            for v in &norm.stds {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        for s in &self.subjects {
            let _ = write!(out, "S {} {}", s.subject_id, s.censor_time);
            if let Some(t) = s.event_time {
                let _ = write!(out, " {t}");
            }
            out.push('\n');
            for step in 0..s.n_steps() {
                let _ = write!(out, "R {} {}", s.subject_id, step as f64 * self.dt);
                for k in 0..self.n_arms {
                    let bit = if s.arm[step] == Some(k) { 1 } else { 0 };
                    let _ = write!(out, " {bit}");
                }
                for j in 0..self.n_covariates {
                    let _ = write!(out, " {}", s.x[[step, j]]);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PanelError> {
        let text = self.to_text();
        let mut file = std::fs::File::create(path)
            .map_err(|e| PanelError::Io { path: path.display().to_string(), source: e })?;
        file.write_all(text.as_bytes())
            .map_err(|e| PanelError::Io { path: path.display().to_string(), source: e })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PanelDataset, PanelError> {
        let file = std::fs::File::open(path)
            .map_err(|e| PanelError::Io { path: path.display().to_string(), source: e })?;
        Self::from_reader(BufReader::new(file), &path.display().to_string())
    }

    pub fn from_text(text: &str) -> Result<PanelDataset, PanelError> {
        Self::from_reader(BufReader::new(text.as_bytes()), "<memory>")
    }

    fn from_reader<R: Read>(reader: BufReader<R>, path: &str) -> Result<PanelDataset, PanelError> {
        let perr = |line: usize, msg: String| PanelError::Parse { path: path.to_string(), line, msg };
        let mut dt: Option<f64> = None;
        let mut n_arms: Option<usize> = None;
        let mut n_cov: Option<usize> = None;
        let mut norm_mean: Option<Vec<f64>> = None;
        let mut norm_std: Option<Vec<f64>> = None;
        let mut version_seen = false;

        struct Building {
            id: u64,
            censor: f64,
            event: Option<f64>,
            arm: Vec<Option<usize>>,
            x: Vec<Vec<f64>>,
        }
        let mut current: Option<Building> = None;
        let mut done: Vec<SubjectPanel> = Vec::new();

        let finish = |b: Building, done: &mut Vec<SubjectPanel>, d: usize| {
            let steps = b.arm.len();
            let mut x = Array2::<f64>::zeros((steps, d));
            for (i, row) in b.x.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    x[[i, j]] = *v;
                }
            }
            done.push(SubjectPanel {
                subject_id: b.id,
                censor_time: b.censor,
                event_time: b.event,
                arm: b.arm,
                x,
            });
        };

        for (lineno, raw) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.map_err(|e| PanelError::Io { path: path.to_string(), source: e })?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                match parts.next() {
                    Some("hazdml-panel") => {
                        let v = parts.next().unwrap_or("");
                        if v != "v1" {
                            return Err(perr(lineno, format!("unsupported format version '{v}'")));
                        }
                        version_seen = true;
                    }
                    Some("dt") => {
                        dt = Some(parse_f64(parts.next(), path, lineno, "dt")?);
                    }
                    Some("arms") => {
                        n_arms = Some(parse_usize(parts.next(), path, lineno, "arms")?);
                    }
                    Some("covariates") => {
                        n_cov = Some(parse_usize(parts.next(), path, lineno, "covariates")?);
                    }
                    Some("norm-mean") => {
                        norm_mean = Some(parse_f64_list(parts, path, lineno)?);
                    }
                    Some("norm-std") => {
                        norm_std = Some(parse_f64_list(parts, path, lineno)?);
                    }
                    _ => {} // free-form comment
                }
                continue;
            }
            if !version_seen {
                return Err(perr(lineno, "file does not start with '#hazdml-panel v1'".into()));
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("S") => {
                    if let Some(b) = current.take() {
                        finish(b, &mut done, n_cov.ok_or_else(|| perr(lineno, "missing '#covariates' header".into()))?);
                    }
                    let id = parse_u64(parts.next(), path, lineno, "subject id")?;
                    let censor = parse_f64(parts.next(), path, lineno, "censor time")?;
                    let event = match parts.next() {
                        Some(tok) => Some(tok.parse::<f64>().map_err(|_| {
                            perr(lineno, format!("event time '{tok}' is not a number"))
                        })?),
                        None => None,
                    };
                    if parts.next().is_some() {
                        return Err(perr(lineno, "trailing tokens on subject header".into()));
                    }
                    current = Some(Building { id, censor, event, arm: Vec::new(), x: Vec::new() });
                }
                Some("R") => {
                    let (dtv, ka, dc) = match (dt, n_arms, n_cov) {
                        (Some(a), Some(b), Some(c)) => (a, b, c),
                        _ => {
                            return Err(perr(
                                lineno,
                                "record before '#dt'/'#arms'/'#covariates' headers".into(),
                            ))
                        }
                    };
                    let b = current.as_mut().ok_or_else(|| {
                        perr(lineno, "record line before any subject header".into())
                    })?;
                    let id = parse_u64(parts.next(), path, lineno, "subject id")?;
                    if id != b.id {
                        return Err(perr(
                            lineno,
                            format!("record for subject {id} under header for subject {}", b.id),
                        ));
                    }
                    let t = parse_f64(parts.next(), path, lineno, "time")?;
                    let expect_t = b.arm.len() as f64 * dtv;
                    if (t - expect_t).abs() > GRID_EPS * dtv.max(1.0) * (1.0 + expect_t.abs()) {
                        return Err(perr(
                            lineno,
                            format!("time {t} of step {} is not on the grid (expected {expect_t})", b.arm.len()),
                        ));
                    }
                    let mut active: Option<usize> = None;
                    for k in 0..ka {
                        let bit = parse_usize(parts.next(), path, lineno, "treatment indicator")?;
                        match bit {
                            0 => {}
                            1 => {
                                if active.is_some() {
                                    return Err(perr(
                                        lineno,
                                        format!(
                                            "subject {id}: more than one active treatment at t = {t}"
                                        ),
                                    ));
                                }
                                active = Some(k);
                            }
                            _ => {
                                return Err(perr(
                                    lineno,
                                    format!("treatment indicator must be 0 or 1, got {bit}"),
                                ))
                            }
                        }
                    }
                    let mut row = Vec::with_capacity(dc);
                    for _ in 0..dc {
                        row.push(parse_f64(parts.next(), path, lineno, "covariate")?);
                    }
                    if parts.next().is_some() {
                        return Err(perr(lineno, "trailing tokens on record line".into()));
                    }
                    b.arm.push(active);
                    b.x.push(row);
                }
                Some(other) => {
                    return Err(perr(lineno, format!("unknown line tag '{other}'")));
                }
                None => {}
            }
        }
        let (dt, n_arms, n_cov) = match (dt, n_arms, n_cov) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(PanelError::Parse {
                    path: path.to_string(),
                    line: 0,
                    msg: "missing '#dt'/'#arms'/'#covariates' headers".into(),
                })
            }
        };
        if let Some(b) = current.take() {
            finish(b, &mut done, n_cov);
        }
        let normalization = match (norm_mean, norm_std) {
            (Some(means), Some(stds)) => Some(Normalization { means, stds }),
            (None, None) => None,
            _ => {
                return Err(PanelError::Parse {
                    path: path.to_string(),
                    line: 0,
                    msg: "normalization headers must give both mean and std".into(),
                })
            }
        };
        PanelDataset::new(done, dt, n_arms, n_cov, normalization)
    }
}

fn parse_f64(tok: Option<&str>, path: &str, line: usize, what: &str) -> Result<f64, PanelError> {
    let tok = tok.ok_or_else(|| PanelError::Parse {
        path: path.to_string(),
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse::<f64>().map_err(|_| PanelError::Parse {
        path: path.to_string(),
        line,
        msg: format!("{what} '{tok}' is not a number"),
    })
}

fn parse_f64_list<'a, I: Iterator<Item = &'a str>>(
    parts: I,
    path: &str,
    line: usize,
) -> Result<Vec<f64>, PanelError> {
    let mut out = Vec::new();
    for tok in parts {
        out.push(tok.parse::<f64>().map_err(|_| PanelError::Parse {
            path: path.to_string(),
            line,
            msg: format!("'{tok}' is not a number"),
        })?);
    }
    Ok(out)
}

fn parse_u64(tok: Option<&str>, path: &str, line: usize, what: &str) -> Result<u64, PanelError> {
    let tok = tok.ok_or_else(|| PanelError::Parse {
        path: path.to_string(),
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse::<u64>().map_err(|_| PanelError::Parse {
        path: path.to_string(),
        line,
        msg: format!("{what} '{tok}' is not an unsigned integer"),
    })
}

fn parse_usize(tok: Option<&str>, path: &str, line: usize, what: &str) -> Result<usize, PanelError> {
    Ok(parse_u64(tok, path, line, what)? as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn toy_subject(id: u64, steps: usize, event: bool, dt: f64) -> SubjectPanel {
        let censor = (steps as f64) * dt * 2.0;
        let event_time = if event { Some((steps as f64 - 0.5) * dt) } else { None };
        let censor = if event { censor } else { (steps as f64 - 0.5) * dt };
        let mut x = Array2::<f64>::zeros((steps, 2));
        for s in 0..steps {
            x[[s, 0]] = id as f64 + s as f64 * 0.1;
            x[[s, 1]] = -(s as f64);
        }
        let arm = (0..steps).map(|s| if s % 2 == 0 { None } else { Some(0) }).collect();
        SubjectPanel { subject_id: id, censor_time: censor, event_time, arm, x }
    }

    fn toy_dataset() -> PanelDataset {
        let dt = 1.0 / 12.0;
        let subjects = vec![
            toy_subject(0, 4, true, dt),
            toy_subject(1, 6, false, dt),
            toy_subject(2, 3, true, dt),
        ];
        PanelDataset::new(subjects, dt, 1, 2, None).unwrap()
    }

    #[test]
    fn event_on_grid_point_belongs_to_interval_starting_there() {
        let dt = 1.0 / 12.0;
        // 2.5 months: inside step 2.
        assert_eq!(step_of_time(2.5 * dt, dt), 2);
        // Exactly 3 months: interval starting at step 3.
        assert_eq!(step_of_time(3.0 * dt, dt), 3);
        // Rounded representation of 3*dt still lands on step 3.
        assert_eq!(step_of_time(0.25f64, dt), 3);
    }

    #[test]
    fn step_count_must_match_followup() {
        let dt = 1.0 / 12.0;
        let mut s = toy_subject(0, 4, true, dt);
        s.arm.pop();
        let err = s.validate(dt, 1, 2).unwrap_err();
        assert!(err.to_string().contains("requires exactly 4"), "{err}");
    }

    #[test]
    fn event_after_censoring_is_rejected() {
        let dt = 1.0 / 12.0;
        let mut s = toy_subject(0, 4, true, dt);
        s.event_time = Some(s.censor_time + 1.0);
        assert!(s.validate(dt, 1, 2).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dt = 1.0 / 12.0;
        let subjects = vec![toy_subject(0, 3, false, dt), toy_subject(0, 4, false, dt)];
        assert!(PanelDataset::new(subjects, dt, 1, 2, None).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ds = toy_dataset().normalize().unwrap();
        let text = ds.to_text();
        let back = PanelDataset::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.n_subjects(), ds.n_subjects());
        for (a, b) in back.subjects().iter().zip(ds.subjects()) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.event_time.map(f64::to_bits), b.event_time.map(f64::to_bits));
            assert_eq!(a.censor_time.to_bits(), b.censor_time.to_bits());
            assert_eq!(a.arm, b.arm);
            for (u, v) in a.x.iter().zip(b.x.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn simultaneous_treatments_fail_parse_with_subject() {
        let text = "#hazdml-panel v1\n#dt 0.5\n#arms 2\n#covariates 1\nS 7 0.4\nR 7 0 1 1 0.3\n";
        let err = PanelDataset::from_text(text).unwrap_err();
        assert!(err.to_string().contains("subject 7"), "{err}");
        assert!(err.to_string().contains("more than one active treatment"), "{err}");
    }

    #[test]
    fn normalization_is_mean_zero_unit_population_variance() {
        let ds = toy_dataset().normalize().unwrap();
        let rows = ds.flat_rows_all();
        let n = rows.x.nrows() as f64;
        for j in 0..ds.n_covariates() {
            let mean = rows.x.column(j).sum() / n;
            let var = rows.x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-12, "var {var}");
        }
    }

    #[test]
    fn two_point_column_normalizes_to_unit_values() {
        // Column [0, 2] must normalize to [-1, 1] (population variance).
        let dt = 1.0;
        let s = SubjectPanel {
            subject_id: 0,
            censor_time: 1.5,
            event_time: None,
            arm: vec![None, None],
            x: array![[0.0], [2.0]],
        };
        let ds = PanelDataset::new(vec![s], dt, 0, 1, None).unwrap().normalize().unwrap();
        let rows = ds.flat_rows_all();
        assert!((rows.x[[0, 0]] + 1.0).abs() < 1e-14);
        assert!((rows.x[[1, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reapplying_stored_stats_to_normalized_data_is_identity_of_stats() {
        let ds = toy_dataset().normalize().unwrap();
        let norm = ds.normalization().unwrap().clone();
        let again = ds.normalize().unwrap();
        let trivial = again.normalization().unwrap();
        for (m, s) in trivial.means.iter().zip(&trivial.stds) {
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Applying the original stored transform to raw data twice differs;
        // the recorded statistics make the provenance explicit.
        assert_eq!(ds.normalization().unwrap(), &norm);
    }

    #[test]
    fn zero_variance_column_is_an_error() {
        let dt = 1.0;
        let s = SubjectPanel {
            subject_id: 0,
            censor_time: 1.5,
            event_time: None,
            arm: vec![None, None],
            x: array![[3.0], [3.0]],
        };
        let ds = PanelDataset::new(vec![s], dt, 0, 1, None).unwrap();
        assert!(matches!(ds.normalize(), Err(PanelError::ZeroVariance(0))));
    }

    #[test]
    fn flat_rows_attach_event_to_final_step() {
        let ds = toy_dataset();
        let rows = ds.flat_rows_all();
        assert_eq!(rows.x.nrows(), 13);
        // Subject 0 has 4 steps, event in the last one.
        assert_eq!(rows.subject_rows[0], 0..4);
        assert!(rows.event[3]);
        assert!(!rows.event[0..3].iter().any(|&e| e));
        // Censored subject has no event row.
        assert!(!rows.event[4..10].iter().any(|&e| e));
    }

    #[test]
    fn subset_preserves_normalization_and_order() {
        let ds = toy_dataset().normalize().unwrap();
        let sub = ds.subset(&[2, 0]).unwrap();
        assert_eq!(sub.n_subjects(), 2);
        assert_eq!(sub.subjects()[0].subject_id, 2);
        assert_eq!(sub.normalization(), ds.normalization());
    }

    #[test]
    fn bootstrap_resample_is_seed_deterministic() {
        let ds = toy_dataset();
        let a = ds.bootstrap_resample(9);
        let b = ds.bootstrap_resample(9);
        let c = ds.bootstrap_resample(10);
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.n_subjects(), ds.n_subjects());
        // A different seed gives a different draw for this toy (checked
        // once here; equality would be astronomically unlikely).
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn elapsed_time_column_is_standardized_when_normalized() {
        let ds = toy_dataset().normalize().unwrap();
        let aug = ds.with_elapsed_time_covariate().unwrap();
        assert_eq!(aug.n_covariates(), 3);
        let rows = aug.flat_rows_all();
        let n = rows.x.nrows() as f64;
        let mean = rows.x.column(2).sum() / n;
        let var = rows.x.column(2).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        assert_eq!(aug.normalization().unwrap().means.len(), 3);
    }
}
