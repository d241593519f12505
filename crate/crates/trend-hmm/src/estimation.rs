//! EM maximum-likelihood fitting: quantile-band initialization, exact M-steps
//! (weighted polynomial regression, transition counts projected to the
//! sigma_minus floor), restarts, and state alignment for evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{posterior, Posteriors};
use crate::model::{shifted_legendre_row, ModelParams, Trajectory, TrendPoly};
use crate::numerics::{best_permutation_with_tiebreak, mix_seed, solve_wls, WlsProblem};

/// EM configuration. `degree_bound` may exceed the truth's degree (the fit is
/// deliberately allowed to be over-parametrized).
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub n_states: usize,
    pub degree_bound: usize,
    pub sigma_minus: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub variance_floor: f64,
}

impl FitConfig {
    /// Defaults: sigma_minus 0, 500 iterations at rel_tol 1e-8, 10 restarts.
    pub fn new(n_states: usize, degree_bound: usize) -> Self {
        FitConfig {
            n_states,
            degree_bound,
            sigma_minus: 0.0,
            max_iters: 500,
            rel_tol: 1e-8,
            n_restarts: 10,
            seed: 0,
            variance_floor: crate::model::VARIANCE_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Invalid("n_states must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Invalid(format!(
                "rel_tol must be > 0, got {}",
                self.rel_tol
            )));
        }
        if self.n_restarts == 0 {
            return Err(Error::Invalid("n_restarts must be >= 1".into()));
        }
        if !(0.0..=1.0 / self.n_states as f64).contains(&self.sigma_minus) {
            return Err(Error::Invalid(format!(
                "sigma_minus must lie in [0, 1/K], got {}",
                self.sigma_minus
            )));
        }
        if !(self.variance_floor >= crate::model::VARIANCE_FLOOR) {
            return Err(Error::Invalid(format!(
                "variance_floor must be >= {}, got {}",
                crate::model::VARIANCE_FLOOR,
                self.variance_floor
            )));
        }
        Ok(())
    }

    fn min_observations(&self) -> usize {
        self.n_states * (self.degree_bound + 2)
    }
}

/// Outcome of [`em_fit`]: the winning restart's parameters, its per-iteration
/// log-likelihood trace (non-decreasing), and the final loglik of every
/// restart (failed restarts recorded as -inf).
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik_trace: Vec<f64>,
    pub restart_logliks: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    /// Final log-likelihood (last trace entry).
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// The n x (d+1) shifted-Legendre design matrix over t = 1..n, u = t/n.
fn time_basis(n: usize, degree_bound: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(n);
    for t in 1..=n {
        let mut row = vec![0.0f64; degree_bound + 1];
        shifted_legendre_row(t as f64 / n as f64, &mut row);
        rows.push(row);
    }
    rows
}

/// Deterministic EM starting point.
///
/// A pooled degree-d fit of Y on the time basis gives a base trend; its
/// residuals are split into K quantile bands within each of up to 16 time
/// windows (so states whose trends drift apart over the sample still map to
/// consistent bands); each band's observations are re-fit to give that
/// state's trend and variance. Restart 0 is the plain quantile
/// initialization; higher restarts perturb the trend coefficients with
/// seeded noise of growing scale.
pub fn initialize(
    traj: &Trajectory,
    config: &FitConfig,
    restart_index: usize,
) -> Result<ModelParams> {
    config.validate()?;
    let n = traj.len();
    let k = config.n_states;
    let d = config.degree_bound;
    if n < config.min_observations() {
        return Err(Error::TooFewObservations {
            n,
            needed: config.min_observations(),
        });
    }
    let basis = time_basis(n, d);
    let y = traj.observations();
    let pooled = WlsProblem::new(basis.clone(), y.to_vec(), vec![1.0; n])?;
    let base = solve_wls(&pooled)?;
    let base_trend = TrendPoly::new(base, n as f64)?;
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - base_trend.eval((i + 1) as f64))
        .collect();

    // Balanced quantile bands per time window: within each window, sort by
    // residual (ties broken by time, so the split is deterministic) and cut
    // into K equal chunks; chunk x across all windows forms state x's point
    // set. Windowing keeps the bands aligned with states even when the
    // trends fan out over the sample.
    let n_windows = (n / 500).clamp(1, 16);
    let mut members_of: Vec<Vec<usize>> = vec![Vec::with_capacity(n / k + 1); k];
    for w in 0..n_windows {
        let lo = w * n / n_windows;
        let hi = (w + 1) * n / n_windows;
        let mut order: Vec<usize> = (lo..hi).collect();
        order.sort_by(|&a, &b| {
            residuals[a]
                .partial_cmp(&residuals[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let m = order.len();
        for x in 0..k {
            members_of[x].extend_from_slice(&order[x * m / k..(x + 1) * m / k]);
        }
    }

    let mut band_coeffs = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for members in &members_of {
        let design: Vec<Vec<f64>> = members.iter().map(|&i| basis[i].clone()).collect();
        let targets: Vec<f64> = members.iter().map(|&i| y[i]).collect();
        let problem = WlsProblem::new(design, targets, vec![1.0; members.len()])?;
        let coeffs = solve_wls(&problem)?;
        let fit = TrendPoly::new(coeffs.clone(), n as f64)?;
        let mse = members
            .iter()
            .map(|&i| {
                let r = y[i] - fit.eval((i + 1) as f64);
                r * r
            })
            .sum::<f64>()
            / members.len() as f64;
        band_coeffs.push(coeffs);
        variances.push(mse.max(config.variance_floor));
    }

    // Restart perturbations use the median band variance as their scale: a
    // band polluted by points from a distant state can report a wildly
    // inflated variance, and noise on that scale would strand the state.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, restart_index as u64));
    let mut sorted_vars = variances.clone();
    sorted_vars.sort_by(f64::total_cmp);
    let spread = sorted_vars[k / 2].sqrt();
    let noise_sd = (restart_index as f64).sqrt() * 0.3 * spread;
    let mut trends = Vec::with_capacity(k);
    for mut coeffs in band_coeffs {
        if restart_index > 0 {
            for c in coeffs.iter_mut() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *c += noise_sd * eps;
            }
        }
        trends.push(TrendPoly::new(coeffs, n as f64)?);
    }

    let sigma_tilde = config.sigma_minus.max(0.1).min(1.0 / k as f64);
    let transition: Vec<Vec<f64>> = (0..k)
        .map(|x| {
            (0..k)
                .map(|y| {
                    if x == y {
                        1.0 - (k - 1) as f64 * sigma_tilde
                    } else {
                        sigma_tilde
                    }
                })
                .collect()
        })
        .collect();
    ModelParams::new(
        vec![1.0 / k as f64; k],
        transition,
        variances,
        trends,
        config.sigma_minus,
    )
}

/// Exact solution of: maximize sum_y counts[y] * log q[y] subject to
/// q[y] >= floor and sum q = 1, by clip-and-renormalize iteration (each pass
/// pins the entries whose proportional share falls below the floor; the
/// remaining mass is spread proportionally, which is the KKT water-filling
/// solution).
pub(crate) fn project_row_to_floor(counts: &[f64], floor: f64) -> Vec<f64> {
    let k = counts.len();
    debug_assert!(floor <= 1.0 / k as f64 + 1e-12);
    let total: f64 = counts.iter().sum();
    let counts: Vec<f64> = if total > 0.0 {
        counts.to_vec()
    } else {
        vec![1.0; k]
    };
    let mut pinned = vec![false; k];
    loop {
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass = 1.0 - floor * n_pinned as f64;
        let s: f64 = (0..k).filter(|&y| !pinned[y]).map(|y| counts[y]).sum();
        let mut changed = false;
        let mut q = vec![0.0f64; k];
        for y in 0..k {
            if pinned[y] {
                q[y] = floor;
            } else {
                let share = if s > 0.0 {
                    counts[y] * free_mass / s
                } else {
                    free_mass / (k - n_pinned) as f64
                };
                if share < floor {
                    pinned[y] = true;
                    changed = true;
                } else {
                    q[y] = share;
                }
            }
        }
        if !changed {
            return q;
        }
    }
}

/// Exact M-step for the smoothing posteriors: transition counts projected to
/// the sigma_minus floor, per-state weighted polynomial regression for the
/// trends, weighted residual variances (floored), initial distribution fixed
/// uniform.
///
/// # Errors
/// [`Error::DegenerateState`] when a state's posterior weight is below
/// 10 * (degree_bound + 1) — too little data to identify its trend.
pub fn m_step(traj: &Trajectory, post: &Posteriors, config: &FitConfig) -> Result<ModelParams> {
    let n = traj.len();
    let k = config.n_states;
    let d = config.degree_bound;
    if post.gamma.len() != n || post.gamma.first().map(|r| r.len()) != Some(k) {
        return Err(Error::Invalid(
            "posteriors do not match trajectory/config shape".into(),
        ));
    }
    let min_weight = 10.0 * (d + 1) as f64;
    let y = traj.observations();
    let basis = time_basis(n, d);

    let mut trends = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for x in 0..k {
        let weights: Vec<f64> = (0..n).map(|t| post.gamma[t][x]).collect();
        let weight: f64 = weights.iter().sum();
        if weight < min_weight {
            return Err(Error::DegenerateState {
                state: x,
                weight,
                min_weight,
            });
        }
        let problem = WlsProblem::new(basis.clone(), y.to_vec(), weights.clone())?;
        let coeffs = solve_wls(&problem)?;
        let trend = TrendPoly::new(coeffs, n as f64)?;
        let wss: f64 = (0..n)
            .map(|t| {
                let r = y[t] - trend.eval((t + 1) as f64);
                weights[t] * r * r
            })
            .sum();
        trends.push(trend);
        variances.push((wss / weight).max(config.variance_floor));
    }

    let mut transition = Vec::with_capacity(k);
    for x in 0..k {
        let counts: Vec<f64> = (0..k)
            .map(|y2| post.xi.iter().map(|m| m[x][y2]).sum::<f64>())
            .collect();
        transition.push(project_row_to_floor(&counts, config.sigma_minus));
    }

    ModelParams::new(
        vec![1.0 / k as f64; k],
        transition,
        variances,
        trends,
        config.sigma_minus,
    )
}

/// Runs a single EM chain from the given starting point.
///
/// Stops when |delta loglik| / (1 + |loglik|) < rel_tol (converged) or after
/// `max_iters` M-steps. The returned params are the ones that produced the
/// last trace entry.
pub fn em_fit_from(traj: &Trajectory, config: &FitConfig, init: ModelParams) -> Result<FitResult> {
    config.validate()?;
    if init.n_states() != config.n_states {
        return Err(Error::Invalid(format!(
            "initial params have {} states, config expects {}",
            init.n_states(),
            config.n_states
        )));
    }
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    loop {
        let post = posterior(&params, traj);
        trace.push(post.loglik);
        let m = trace.len();
        if m >= 2 {
            let delta = (trace[m - 1] - trace[m - 2]).abs();
            if delta / (1.0 + trace[m - 1].abs()) < config.rel_tol {
                converged = true;
                break;
            }
        }
        if m - 1 >= config.max_iters {
            break;
        }
        params = m_step(traj, &post, config)?;
    }
    let final_ll = *trace.last().unwrap();
    Ok(FitResult {
        params,
        iterations: trace.len() - 1,
        restart_logliks: vec![final_ll],
        loglik_trace: trace,
        converged,
    })
}

/// EM with restarts: runs `n_restarts` independent chains (in parallel when a
/// thread pool is available) and keeps the best final log-likelihood, ties
/// resolved toward the lower restart index.
///
/// # Errors
/// [`Error::TooFewObservations`] when n < K (d+2);
/// [`Error::AllRestartsFailed`] when every restart errors (e.g. all hit
/// degenerate states).
pub fn em_fit(traj: &Trajectory, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if traj.len() < config.min_observations() {
        return Err(Error::TooFewObservations {
            n: traj.len(),
            needed: config.min_observations(),
        });
    }
    let runs: Vec<Result<FitResult>> = (0..config.n_restarts)
        .into_par_iter()
        .map(|r| initialize(traj, config, r).and_then(|p| em_fit_from(traj, config, p)))
        .collect();

    let restart_logliks: Vec<f64> = runs
        .iter()
        .map(|r| r.as_ref().map(|f| f.loglik()).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if r.is_ok() && best.is_none_or(|b| restart_logliks[i] > restart_logliks[b]) {
            best = Some(i);
        }
    }
    match best {
        Some(i) => {
            let mut result = runs.into_iter().nth(i).unwrap().unwrap();
            result.restart_logliks = restart_logliks;
            Ok(result)
        }
        None => {
            let last = runs
                .into_iter()
                .filter_map(|r| r.err())
                .next_back()
                .map(|e| e.to_string())
                .unwrap_or_else(|| "no restarts ran".into());
            Err(Error::AllRestartsFailed(config.n_restarts, last))
        }
    }
}

/// The permutation `perm` minimizing the summed sup-norm trend distance
/// between `est.permuted(perm)` and `truth` over a grid on [0, horizon],
/// with |variance difference| as tie-break.
pub fn align_states(est: &ModelParams, truth: &ModelParams, horizon: f64) -> Vec<usize> {
    assert_eq!(est.n_states(), truth.n_states(), "state counts differ");
    let k = est.n_states();
    let grid: Vec<f64> = (0..=256).map(|i| horizon * i as f64 / 256.0).collect();
    let mut cost = vec![vec![0.0f64; k]; k];
    let mut tie = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..k {
            cost[i][j] = grid
                .iter()
                .map(|&t| (est.trend(i).eval(t) - truth.trend(j).eval(t)).abs())
                .fold(0.0, f64::max);
            tie[i][j] = (est.variances()[i] - truth.variances()[j]).abs();
        }
    }
    best_permutation_with_tiebreak(&cost, Some(&tie))
}
