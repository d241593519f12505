//! Exact inference for the inhomogeneous chain: emission log-densities with
//! time-varying means, log-domain forward-backward, and a brute-force path
//! enumeration used as an oracle in tests.
//!
//! Everything runs in log domain with per-step normalization: at n = 1e5 the
//! trends diverge and linear-domain scaling is fragile, while normalized log
//! recursions cannot underflow to an all-zero step.

use crate::error::{Error, Result};
use crate::model::{ModelParams, Trajectory};
use crate::numerics::{log_sum_exp, LogSumAcc};

/// Smoothing output of one E-step.
///
/// `gamma[t][x] = P(X_{t+1} = x | Y_1..Y_n)` (index t is 0-based time),
/// `xi[t][x][y] = P(X_{t+1} = x, X_{t+2} = y | Y_1..Y_n)` for t < n-1, and
/// `loglik = log p(Y_1..Y_n)`.
#[derive(Clone, Debug)]
pub struct Posteriors {
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    pub loglik: f64,
}

/// Log-density of Y_t = y under each state: entry x is
/// -0.5 log(2 pi sigma_x^2) - (y - T_x(t))^2 / (2 sigma_x^2).
pub fn emission_logdensity(params: &ModelParams, y: f64, t: f64) -> Vec<f64> {
    (0..params.n_states())
        .map(|x| {
            let var = params.variances()[x];
            let r = y - params.trend(x).eval(t);
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - r * r / (2.0 * var)
        })
        .collect()
}

/// All emission log-densities for a trajectory, row t (0-based) for time t+1.
fn emission_table(params: &ModelParams, traj: &Trajectory) -> Vec<Vec<f64>> {
    traj.observations()
        .iter()
        .enumerate()
        .map(|(i, &y)| emission_logdensity(params, y, (i + 1) as f64))
        .collect()
}

fn log_transition(params: &ModelParams) -> Vec<Vec<f64>> {
    params
        .transition()
        .iter()
        .map(|row| row.iter().map(|&q| q.ln()).collect())
        .collect()
}

/// Normalized log-domain forward pass.
///
/// Returns `(loglik, log_filter)` where `log_filter[t][x] = log P(X_{t+1} = x
/// | Y_1..Y_{t+1})` (each row normalizes to 1) and loglik = log p(Y_1..Y_n).
pub fn log_forward(params: &ModelParams, traj: &Trajectory) -> (f64, Vec<Vec<f64>>) {
    let le = emission_table(params, traj);
    let lq = log_transition(params);
    log_forward_with(params.initial_dist(), &lq, &le)
}

/// Forward pass over precomputed log emissions; shared with the theory
/// module's gated and homogenized likelihoods.
pub(crate) fn log_forward_with(
    initial_dist: &[f64],
    log_q: &[Vec<f64>],
    log_emission: &[Vec<f64>],
) -> (f64, Vec<Vec<f64>>) {
    let n = log_emission.len();
    let k = initial_dist.len();
    let mut log_filter: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut loglik = 0.0f64;
    let mut joint = vec![0.0f64; k];
    let mut scratch = vec![0.0f64; k];
    for t in 0..n {
        if t == 0 {
            for x in 0..k {
                joint[x] = initial_dist[x].ln() + log_emission[0][x];
            }
        } else {
            let prev = &log_filter[t - 1];
            for (y, j) in joint.iter_mut().enumerate() {
                for x in 0..k {
                    scratch[x] = prev[x] + log_q[x][y];
                }
                *j = log_sum_exp(&scratch) + log_emission[t][y];
            }
        }
        let c = log_sum_exp(&joint);
        loglik += c;
        log_filter.push(joint.iter().map(|v| v - c).collect());
    }
    (loglik, log_filter)
}

/// Exact log-likelihood by summing over all K^n hidden paths.
///
/// # Errors
/// [`Error::BruteForceTooLarge`] when K^n exceeds 1e7 paths.
pub fn brute_force_loglik(params: &ModelParams, traj: &Trajectory) -> Result<f64> {
    let k = params.n_states();
    let n = traj.len();
    let paths = (k as f64).powi(n as i32);
    if paths > 1e7 {
        return Err(Error::BruteForceTooLarge { paths });
    }
    let le = emission_table(params, traj);
    let lq = log_transition(params);
    let lpi: Vec<f64> = params.initial_dist().iter().map(|&p| p.ln()).collect();
    let mut acc = LogSumAcc::new();
    let mut path = vec![0usize; n];
    loop {
        let mut lp = lpi[path[0]] + le[0][path[0]];
        for t in 1..n {
            lp += lq[path[t - 1]][path[t]] + le[t][path[t]];
        }
        acc.add(lp);
        // Odometer increment over [0, k)^n.
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(acc.value());
            }
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Forward-backward smoothing: state marginals, pairwise marginals, and the
/// log-likelihood (identical to [`log_forward`]'s by construction).
pub fn posterior(params: &ModelParams, traj: &Trajectory) -> Posteriors {
    let le = emission_table(params, traj);
    let lq = log_transition(params);
    let n = traj.len();
    let k = params.n_states();
    let (loglik, lf) = log_forward_with(params.initial_dist(), &lq, &le);

    // Normalized log-domain backward pass.
    let mut lb = vec![vec![0.0f64; k]; n];
    let mut scratch = vec![0.0f64; k];
    for t in (0..n.saturating_sub(1)).rev() {
        for x in 0..k {
            for y in 0..k {
                scratch[y] = lq[x][y] + le[t + 1][y] + lb[t + 1][y];
            }
            lb[t][x] = log_sum_exp(&scratch);
        }
        let c = log_sum_exp(&lb[t]);
        lb[t].iter_mut().for_each(|v| *v -= c);
    }

    let mut gamma = Vec::with_capacity(n);
    for t in 0..n {
        let lg: Vec<f64> = (0..k).map(|x| lf[t][x] + lb[t][x]).collect();
        let c = log_sum_exp(&lg);
        gamma.push(lg.iter().map(|v| (v - c).exp()).collect::<Vec<f64>>());
    }

    let mut xi = Vec::with_capacity(n.saturating_sub(1));
    let mut terms = vec![0.0f64; k * k];
    for t in 0..n.saturating_sub(1) {
        for x in 0..k {
            for y in 0..k {
                terms[x * k + y] = lf[t][x] + lq[x][y] + le[t + 1][y] + lb[t + 1][y];
            }
        }
        let c = log_sum_exp(&terms);
        xi.push(
            (0..k)
                .map(|x| {
                    (0..k)
                        .map(|y| (terms[x * k + y] - c).exp())
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<Vec<f64>>>(),
        );
    }
    Posteriors { gamma, xi, loglik }
}
