//! Config-driven simulation studies: a convergence-rate experiment that
//! refits growing prefixes of simulated trajectories, a fixed-length
//! experiment reporting the fit against the generator, slope fitting for
//! log-log error decay, and deterministic CSV/report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{io_err, Error, Result};
use crate::estimation::{align_states, em_fit, em_fit_from, FitConfig, FitResult};
use crate::model::{
    compute_blocks, default_block_grid, default_block_tolerance, simulate, ModelParams, Trajectory,
    TrendPoly,
};
use crate::numerics::{fit_line, mix_seed};
use crate::theory::{
    assign_blocks, block_gap, minimal_tube_m, sup_trend_error, tube_check, TubeReport,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Rate,
    FixedN,
    Diagnostics,
}

/// A fully validated experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub truth: ModelParams,
    pub n_values: Vec<usize>,
    pub n_replications: usize,
    pub fit: FitConfig,
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
}

/// Runtime switches that do not live in the config file.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Disable warm starts between successive lengths of the rate study.
    pub cold_start: bool,
    /// Record wall-clock times; off by default so outputs are byte-stable.
    pub timing: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: String,
    n_values: Vec<usize>,
    n_replications: Option<usize>,
    master_seed: u64,
    output_dir: Option<String>,
    truth: RawTruth,
    fit: RawFit,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruth {
    n_scale: Option<f64>,
    sigma_minus: Option<f64>,
    initial_dist: Option<Vec<f64>>,
    transition: Vec<Vec<f64>>,
    variances: Vec<f64>,
    trends_monomial: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFit {
    n_states: Option<usize>,
    degree_bound: usize,
    sigma_minus: Option<f64>,
    max_iters: Option<usize>,
    rel_tol: Option<f64>,
    n_restarts: Option<usize>,
    variance_floor: Option<f64>,
}

/// Loads and validates a config file (key/value document; see the bundled
/// `configs/*.cfg` for the grammar).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| Error::ConfigParse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    config_from_raw(raw)
}

fn config_from_raw(raw: RawConfig) -> Result<ExperimentConfig> {
    let kind = match raw.kind.as_str() {
        "rate" => ExperimentKind::Rate,
        "fixed_n" => ExperimentKind::FixedN,
        "diagnostics" => ExperimentKind::Diagnostics,
        other => {
            return Err(Error::Invalid(format!(
                "field 'kind' must be one of rate, fixed_n, diagnostics; got '{other}'"
            )))
        }
    };
    if raw.n_values.is_empty() {
        return Err(Error::Invalid("field 'n_values' must be non-empty".into()));
    }
    if raw.n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "field 'n_values' must be strictly increasing".into(),
        ));
    }
    let n_replications = raw.n_replications.unwrap_or(1);
    if n_replications == 0 {
        return Err(Error::Invalid("field 'n_replications' must be >= 1".into()));
    }
    let n_max = *raw.n_values.last().expect("non-empty");
    let n_scale = raw.truth.n_scale.unwrap_or(n_max as f64);
    if !(n_scale > 0.0) || !n_scale.is_finite() {
        return Err(Error::Invalid(format!(
            "field 'truth.n_scale' must be positive and finite, got {n_scale}"
        )));
    }
    let k = raw.truth.transition.len();
    if raw.truth.trends_monomial.len() != k {
        return Err(Error::Invalid(format!(
            "field 'truth.trends_monomial' has {} rows but the transition matrix has {k} states",
            raw.truth.trends_monomial.len()
        )));
    }
    let trends: Vec<TrendPoly> = raw
        .truth
        .trends_monomial
        .iter()
        .map(|row| TrendPoly::from_monomial(row, n_scale))
        .collect::<Result<_>>()?;
    let initial_dist = raw
        .truth
        .initial_dist
        .unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let truth = ModelParams::new(
        initial_dist,
        raw.truth.transition,
        raw.truth.variances,
        trends,
        raw.truth.sigma_minus.unwrap_or(0.0),
    )?;

    let defaults = FitConfig::new(raw.fit.n_states.unwrap_or(k), raw.fit.degree_bound);
    let fit = FitConfig {
        sigma_minus: raw.fit.sigma_minus.unwrap_or(defaults.sigma_minus),
        max_iters: raw.fit.max_iters.unwrap_or(defaults.max_iters),
        rel_tol: raw.fit.rel_tol.unwrap_or(defaults.rel_tol),
        n_restarts: raw.fit.n_restarts.unwrap_or(defaults.n_restarts),
        variance_floor: raw.fit.variance_floor.unwrap_or(defaults.variance_floor),
        seed: raw.master_seed,
        ..defaults
    };
    fit.validate()?;

    Ok(ExperimentConfig {
        kind,
        truth,
        n_values: raw.n_values,
        n_replications,
        fit,
        output_dir: raw.output_dir.map(PathBuf::from),
        master_seed: raw.master_seed,
    })
}

/// The seed used to simulate replication `r`'s trajectory, derived from the
/// master seed. Exposed so external drivers can regenerate the same data.
pub fn replication_seed(master_seed: u64, replication: usize) -> u64 {
    mix_seed(master_seed, replication as u64)
}

// ---------------------------------------------------------------------------
// Error records
// ---------------------------------------------------------------------------

/// Per-(replication, length) evaluation of one fit against the generator.
#[derive(Clone, Debug)]
pub struct ErrorRecord {
    pub replication: usize,
    pub n: usize,
    /// Per-state sup-norm trend error on [0, n], after state alignment.
    pub err_trend_sup: Vec<f64>,
    pub err_q_frobenius: f64,
    pub err_var_max: f64,
    pub loglik: f64,
    pub wall_time_s: f64,
    /// "ok", or a description of the fit failure.
    pub status: String,
}

impl ErrorRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Evaluates a fit against the generating parameters: states are aligned by
/// trend distance first, so relabeling the fit does not change the record.
pub fn error_record(
    truth: &ModelParams,
    fitted: &ModelParams,
    replication: usize,
    n: usize,
    loglik: f64,
) -> ErrorRecord {
    let horizon = n as f64;
    let perm = align_states(fitted, truth, horizon);
    let aligned = fitted.permuted(&perm);
    let k = truth.n_states();
    let mut q2 = 0.0;
    for x in 0..k {
        for y in 0..k {
            let d = truth.transition()[x][y] - aligned.transition()[x][y];
            q2 += d * d;
        }
    }
    let err_var_max = (0..k)
        .map(|x| (truth.variances()[x] - aligned.variances()[x]).abs())
        .fold(0.0, f64::max);
    ErrorRecord {
        replication,
        n,
        err_trend_sup: sup_trend_error(fitted, truth, &perm, horizon),
        err_q_frobenius: q2.sqrt(),
        err_var_max,
        loglik,
        wall_time_s: 0.0,
        status: "ok".into(),
    }
}

fn failed_record(replication: usize, n: usize, k: usize, wall: f64, err: &Error) -> ErrorRecord {
    let status = format!("error: {err}").replace(',', ";").replace('\n', " ");
    ErrorRecord {
        replication,
        n,
        err_trend_sup: vec![f64::NAN; k],
        err_q_frobenius: f64::NAN,
        err_var_max: f64::NAN,
        loglik: f64::NAN,
        wall_time_s: wall,
        status,
    }
}

// ---------------------------------------------------------------------------
// Rate experiment
// ---------------------------------------------------------------------------

/// Rescales a fit's trends to a new horizon so it can seed the next fit.
fn rescale_to_horizon(params: &ModelParams, n_scale: f64) -> Result<ModelParams> {
    let trends: Vec<TrendPoly> = params
        .trends()
        .iter()
        .map(|t| t.rescaled(n_scale))
        .collect::<Result<_>>()?;
    ModelParams::new(
        params.initial_dist().to_vec(),
        params.transition().to_vec(),
        params.variances().to_vec(),
        trends,
        params.sigma_minus(),
    )
}

/// Random-restart fit, optionally racing one extra chain warm-started from a
/// previous fit; the better log-likelihood wins.
fn fit_with_warm(
    traj: &Trajectory,
    config: &FitConfig,
    warm: Option<&ModelParams>,
) -> Result<FitResult> {
    let base = em_fit(traj, config);
    let warm_run = warm.and_then(|w| {
        let init = rescale_to_horizon(w, traj.len() as f64).ok()?;
        em_fit_from(traj, config, init).ok()
    });
    match (base, warm_run) {
        (Ok(b), Some(w)) => Ok(if w.loglik() > b.loglik() { w } else { b }),
        (Ok(b), None) => Ok(b),
        (Err(_), Some(w)) => Ok(w),
        (Err(e), None) => Err(e),
    }
}

/// For each replication, simulates one trajectory of length max(n_values)
/// and refits its prefixes at every length, reusing the previous fit as a
/// warm start unless `options.cold_start`. Replications run in parallel;
/// results are deterministic given the master seed.
pub fn run_rate_experiment(
    config: &ExperimentConfig,
    options: RunOptions,
) -> Result<Vec<ErrorRecord>> {
    if config.kind != ExperimentKind::Rate {
        return Err(Error::Invalid(
            "field 'kind' must be 'rate' for the rate experiment".into(),
        ));
    }
    let n_max = *config.n_values.last().expect("validated non-empty");
    let per_rep: Vec<Vec<ErrorRecord>> = (0..config.n_replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<ErrorRecord>> {
            let traj = simulate(
                &config.truth,
                n_max,
                replication_seed(config.master_seed, r),
            )?;
            let mut rows = Vec::with_capacity(config.n_values.len());
            let mut warm: Option<ModelParams> = None;
            for (j, &n) in config.n_values.iter().enumerate() {
                let sub = traj.prefix(n)?;
                let mut fit_cfg = config.fit.clone();
                fit_cfg.seed = mix_seed(
                    mix_seed(config.master_seed, 0x5EED_0000 + r as u64),
                    j as u64,
                );
                let started = Instant::now();
                let outcome = fit_with_warm(
                    &sub,
                    &fit_cfg,
                    if options.cold_start {
                        None
                    } else {
                        warm.as_ref()
                    },
                );
                let wall = if options.timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                match outcome {
                    Ok(fit) => {
                        let mut rec = error_record(&config.truth, &fit.params, r, n, fit.loglik());
                        rec.wall_time_s = wall;
                        warm = Some(fit.params);
                        rows.push(rec);
                    }
                    Err(e) => rows.push(failed_record(r, n, config.truth.n_states(), wall, &e)),
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Fixed-length experiment
// ---------------------------------------------------------------------------

/// Outcome of the fixed-length study: one fit at the largest length,
/// evaluated against the generator.
#[derive(Clone, Debug)]
pub struct FixedNReport {
    /// Fitted parameters, relabeled to match the generator's states.
    pub aligned: ModelParams,
    pub record: ErrorRecord,
    /// Smallest tube radius at which the fitted trends both cover and stay
    /// inside the generator's tubes.
    pub minimal_m: f64,
    pub tube: TubeReport,
    /// Per-observation cost of revealing the block labels under the fit.
    pub block_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Simulates at n = max(n_values), fits once, and reports alignment, tube,
/// and block-gap diagnostics.
pub fn run_fixed_n_experiment(
    config: &ExperimentConfig,
    options: RunOptions,
) -> Result<FixedNReport> {
    if config.kind != ExperimentKind::FixedN {
        return Err(Error::Invalid(
            "field 'kind' must be 'fixed_n' for the fixed-length experiment".into(),
        ));
    }
    let n = *config.n_values.last().expect("validated non-empty");
    let horizon = n as f64;
    let traj = simulate(&config.truth, n, replication_seed(config.master_seed, 0))?;
    let mut fit_cfg = config.fit.clone();
    fit_cfg.seed = mix_seed(config.master_seed, 0xF17);
    let started = Instant::now();
    let fit = em_fit(&traj, &fit_cfg)?;
    let wall = if options.timing {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mut record = error_record(&config.truth, &fit.params, 0, n, fit.loglik());
    record.wall_time_s = wall;
    let perm = align_states(&fit.params, &config.truth, horizon);
    let aligned = fit.params.permuted(&perm);

    let grid = default_block_grid(horizon);
    let tol = default_block_tolerance(&config.truth, &grid);
    let blocks = compute_blocks(&config.truth, tol, &grid)?;
    let minimal_m = minimal_tube_m(&aligned, &config.truth, horizon);
    let tube = tube_check(
        &aligned,
        &config.truth,
        (minimal_m + 1e-9).max(1e-12),
        horizon,
    );
    let bmap = assign_blocks(&aligned, &blocks, horizon);
    let gap = block_gap(&aligned, &traj, &bmap);

    Ok(FixedNReport {
        aligned,
        record,
        minimal_m,
        tube,
        block_gap: gap,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

// ---------------------------------------------------------------------------
// Slopes
// ---------------------------------------------------------------------------

/// One fitted log-log decay line per error metric.
#[derive(Clone, Debug)]
pub struct SlopeRow {
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
}

fn metric_count(k: usize) -> usize {
    k + 2
}

fn metric_name(idx: usize, k: usize) -> String {
    if idx < k {
        format!("err_trend_sup_{}", idx + 1)
    } else if idx == k {
        "err_q_frobenius".into()
    } else {
        "err_var_max".into()
    }
}

fn metric_value(rec: &ErrorRecord, idx: usize, k: usize) -> f64 {
    if idx < k {
        rec.err_trend_sup[idx]
    } else if idx == k {
        rec.err_q_frobenius
    } else {
        rec.err_var_max
    }
}

/// Fits log(mean error over replications) against log n for every metric.
/// Needs successful records at two or more distinct lengths.
pub fn fit_slopes(records: &[ErrorRecord]) -> Result<Vec<SlopeRow>> {
    let ok: Vec<&ErrorRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let k = match ok.first() {
        Some(r) => r.err_trend_sup.len(),
        None => return Err(Error::DegenerateLine),
    };
    let mut ns: Vec<usize> = ok.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 {
        return Err(Error::DegenerateLine);
    }
    let mut rows = Vec::with_capacity(metric_count(k));
    for idx in 0..metric_count(k) {
        let mut xs = Vec::with_capacity(ns.len());
        let mut ys = Vec::with_capacity(ns.len());
        for &n in &ns {
            let vals: Vec<f64> = ok
                .iter()
                .filter(|r| r.n == n)
                .map(|r| metric_value(r, idx, k))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            xs.push((n as f64).ln());
            ys.push(mean.max(f64::MIN_POSITIVE).ln());
        }
        let (slope, intercept) = fit_line(&xs, &ys)?;
        rows.push(SlopeRow {
            metric: metric_name(idx, k),
            slope,
            intercept,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| io_err(&path, e))
}

fn errors_csv_header(k: usize) -> String {
    let mut header = String::from("replication,n");
    for x in 1..=k {
        let _ = write!(header, ",err_trend_sup_{x}");
    }
    header.push_str(",err_q_frobenius,err_var_max,loglik,wall_time_s,status\n");
    header
}

/// Renders records as CSV (replications are 1-based in the file).
pub fn errors_to_csv(records: &[ErrorRecord], k: usize) -> String {
    let mut out = errors_csv_header(k);
    for r in records {
        let _ = write!(out, "{},{}", r.replication + 1, r.n);
        for v in &r.err_trend_sup {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            r.err_q_frobenius, r.err_var_max, r.loglik, r.wall_time_s, r.status
        );
    }
    out
}

/// Parses records back from `errors.csv` content.
pub fn read_errors_csv(path: &Path) -> Result<Vec<ErrorRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty errors csv", path.display())))?;
    let k = header.matches("err_trend_sup_").count();
    let fixed = 2 + k + 5;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != fixed {
            return Err(Error::Invalid(format!(
                "{} line {}: expected {fixed} fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Invalid(format!(
                    "{} line {}: bad number '{s}'",
                    path.display(),
                    i + 2
                ))
            })
        };
        let replication: usize = fields[0].parse().map_err(|_| {
            Error::Invalid(format!(
                "{} line {}: bad replication",
                path.display(),
                i + 2
            ))
        })?;
        let n: usize = fields[1]
            .parse()
            .map_err(|_| Error::Invalid(format!("{} line {}: bad n", path.display(), i + 2)))?;
        let err_trend_sup = fields[2..2 + k]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<f64>>>()?;
        records.push(ErrorRecord {
            replication: replication - 1,
            n,
            err_trend_sup,
            err_q_frobenius: parse(fields[2 + k])?,
            err_var_max: parse(fields[3 + k])?,
            loglik: parse(fields[4 + k])?,
            wall_time_s: parse(fields[5 + k])?,
            status: fields[6 + k].to_string(),
        });
    }
    Ok(records)
}

/// Renders the fixed-length report as plain text.
pub fn format_fixed_n_report(report: &FixedNReport) -> String {
    let mut out = String::new();
    let k = report.aligned.n_states();
    let _ = writeln!(out, "fixed-length fit report");
    let _ = writeln!(out, "n = {}", report.record.n);
    let _ = writeln!(
        out,
        "converged = {} after {} iterations",
        report.converged, report.iterations
    );
    let _ = writeln!(out, "loglik = {}", report.record.loglik);
    let _ = writeln!(out, "\naligned transition matrix:");
    for x in 0..k {
        let row: Vec<String> = report.aligned.transition()[x]
            .iter()
            .map(|q| format!("{q:.6}"))
            .collect();
        let _ = writeln!(out, "  [{}]", row.join(", "));
    }
    let vars: Vec<String> = report
        .aligned
        .variances()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    let _ = writeln!(out, "\naligned variances: [{}]", vars.join(", "));
    let sups: Vec<String> = report
        .record
        .err_trend_sup
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    let _ = writeln!(out, "trend sup errors: [{}]", sups.join(", "));
    let _ = writeln!(
        out,
        "transition error (frobenius) = {:.6}",
        report.record.err_q_frobenius
    );
    let _ = writeln!(out, "max variance error = {:.6}", report.record.err_var_max);
    let _ = writeln!(out, "\nminimal tube radius = {:.6}", report.minimal_m);
    let _ = writeln!(
        out,
        "tube at that radius: cover_ok = {}, containment_ok = {}",
        report.tube.cover_ok, report.tube.containment_ok
    );
    let _ = writeln!(out, "per-pair sup distances (rows = generator states):");
    for row in &report.tube.per_pair_sup {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "  [{}]", cells.join(", "));
    }
    let _ = writeln!(out, "\nblock information gap = {}", report.block_gap);
    out
}

/// Writes `errors.csv`, `slopes.csv`, per-metric `plotdata_*.csv`, and (for
/// the fixed-length study) `report.txt` into `output_dir`.
pub fn write_outputs(
    records: &[ErrorRecord],
    report: Option<&FixedNReport>,
    output_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(output_dir).map_err(|e| io_err(output_dir, e))?;
    let k = records
        .first()
        .map(|r| r.err_trend_sup.len())
        .or_else(|| report.map(|rp| rp.aligned.n_states()))
        .unwrap_or(1);
    write_file(output_dir, "errors.csv", &errors_to_csv(records, k))?;

    let mut slopes_csv = String::from("metric,slope,intercept\n");
    if let Ok(rows) = fit_slopes(records) {
        for row in rows {
            let _ = writeln!(slopes_csv, "{},{},{}", row.metric, row.slope, row.intercept);
        }
    }
    write_file(output_dir, "slopes.csv", &slopes_csv)?;

    if !records.is_empty() {
        let ok: Vec<&ErrorRecord> = records.iter().filter(|r| r.is_ok()).collect();
        let mut ns: Vec<usize> = ok.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        for idx in 0..metric_count(k) {
            let mut csv = String::from("log10_n,log10_mean_err,log10_min_err,log10_max_err\n");
            for &n in &ns {
                let vals: Vec<f64> = ok
                    .iter()
                    .filter(|r| r.n == n)
                    .map(|r| metric_value(r, idx, k))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    (n as f64).log10(),
                    mean.max(f64::MIN_POSITIVE).log10(),
                    min.max(f64::MIN_POSITIVE).log10(),
                    max.max(f64::MIN_POSITIVE).log10()
                );
            }
            write_file(
                output_dir,
                &format!("plotdata_{}.csv", metric_name(idx, k)),
                &csv,
            )?;
        }
    }

    if let Some(rep) = report {
        write_file(output_dir, "report.txt", &format_fixed_n_report(rep))?;
    }
    Ok(())
}
