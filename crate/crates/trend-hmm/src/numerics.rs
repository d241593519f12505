//! Shared numeric kernels: log-domain reductions, weighted least squares,
//! permutation matching, and line fitting.

use crate::error::{Error, Result};

/// log(sum_i exp(v_i)), overflow-safe.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (or empty): the sum is 0. A +inf or NaN max propagates.
        return m;
    }
    let s: f64 = values.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Streaming log-sum-exp accumulator for sums too large to materialize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LogSumAcc {
    max: f64,
    sum: f64,
}

impl LogSumAcc {
    pub fn new() -> Self {
        LogSumAcc {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// A weighted least squares instance: minimize sum_i w_i (y_i - a_i . beta)^2.
#[derive(Clone, Debug)]
pub struct WlsProblem {
    design: Vec<Vec<f64>>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl WlsProblem {
    pub fn new(design: Vec<Vec<f64>>, targets: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = design.len();
        if m == 0 {
            return Err(Error::Invalid("design has no rows".into()));
        }
        let p = design[0].len();
        if p == 0 {
            return Err(Error::Invalid("design has no columns".into()));
        }
        if design.iter().any(|r| r.len() != p) {
            return Err(Error::Invalid("design rows have unequal lengths".into()));
        }
        if targets.len() != m {
            return Err(Error::Invalid(format!(
                "targets length {} does not match {} design rows",
                targets.len(),
                m
            )));
        }
        if weights.len() != m {
            return Err(Error::Invalid(format!(
                "weights length {} does not match {} design rows",
                weights.len(),
                m
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("weights must be finite and >= 0".into()));
        }
        let positive = weights.iter().filter(|&&w| w > 0.0).count();
        if positive < p {
            return Err(Error::RankDeficient {
                rank: positive.min(p),
                needed: p,
            });
        }
        Ok(WlsProblem {
            design,
            targets,
            weights,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.design.len()
    }

    pub fn n_cols(&self) -> usize {
        self.design[0].len()
    }

    /// Objective value at a candidate solution.
    pub fn objective(&self, beta: &[f64]) -> f64 {
        self.design
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((row, &y), &w)| {
                let pred: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
                w * (y - pred) * (y - pred)
            })
            .sum()
    }
}

/// Solves a weighted least squares problem by Householder QR with column
/// pivoting on the sqrt(w)-scaled design.
///
/// # Errors
/// [`Error::RankDeficient`] when the weighted design does not have full
/// column rank.
pub fn solve_wls(problem: &WlsProblem) -> Result<Vec<f64>> {
    let m = problem.n_rows();
    let p = problem.n_cols();

    // Scale rows by sqrt(w); rows with zero weight contribute nothing but are
    // kept to avoid reindexing.
    let mut a = vec![0.0f64; m * p];
    let mut b = vec![0.0f64; m];
    for i in 0..m {
        let s = problem.weights[i].sqrt();
        for j in 0..p {
            a[i * p + j] = s * problem.design[i][j];
        }
        b[i] = s * problem.targets[i];
    }

    // Householder QR with column pivoting; `piv[j]` is the original column
    // stored in position j.
    let mut piv: Vec<usize> = (0..p).collect();
    let mut col_norms: Vec<f64> = (0..p)
        .map(|j| (0..m).map(|i| a[i * p + j] * a[i * p + j]).sum())
        .collect();
    let max_norm0 = col_norms.iter().cloned().fold(0.0f64, f64::max);
    let mut rank = p;

    for k in 0..p.min(m) {
        // Pivot: bring the column with the largest remaining norm to position k.
        let (jmax, _) = col_norms
            .iter()
            .enumerate()
            .skip(k)
            .fold(
                (k, -1.0),
                |acc, (j, &nj)| if nj > acc.1 { (j, nj) } else { acc },
            );
        if jmax != k {
            for i in 0..m {
                a.swap(i * p + k, i * p + jmax);
            }
            piv.swap(k, jmax);
            col_norms.swap(k, jmax);
        }

        let alpha: f64 = (k..m)
            .map(|i| a[i * p + k] * a[i * p + k])
            .sum::<f64>()
            .sqrt();
        if alpha <= 1e-12 * (1.0 + max_norm0.sqrt()) {
            rank = k;
            break;
        }
        let sign = if a[k * p + k] >= 0.0 { 1.0 } else { -1.0 };
        // Householder vector v = x + sign*alpha*e1, stored in place below the
        // diagonal; the diagonal of R is -sign*alpha.
        let mut v0 = a[k * p + k] + sign * alpha;
        if v0 == 0.0 {
            v0 = sign * alpha;
        }
        let mut vnorm2 = v0 * v0;
        for i in (k + 1)..m {
            vnorm2 += a[i * p + k] * a[i * p + k];
        }
        // Apply H = I - 2 v v^T / |v|^2 to the trailing columns and target.
        for j in (k + 1)..p {
            let mut dot = v0 * a[k * p + j];
            for i in (k + 1)..m {
                dot += a[i * p + k] * a[i * p + j];
            }
            let f = 2.0 * dot / vnorm2;
            a[k * p + j] -= f * v0;
            for i in (k + 1)..m {
                a[i * p + j] -= f * a[i * p + k];
            }
        }
        {
            let mut dot = v0 * b[k];
            for i in (k + 1)..m {
                dot += a[i * p + k] * b[i];
            }
            let f = 2.0 * dot / vnorm2;
            b[k] -= f * v0;
            for i in (k + 1)..m {
                b[i] -= f * a[i * p + k];
            }
        }
        a[k * p + k] = -sign * alpha;
        for j in (k + 1)..p {
            col_norms[j] -= a[k * p + j] * a[k * p + j];
        }
    }

    if rank < p {
        return Err(Error::RankDeficient { rank, needed: p });
    }

    // Back substitution on R (upper triangular in the pivoted columns).
    let mut beta_piv = vec![0.0f64; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in (k + 1)..p {
            s -= a[k * p + j] * beta_piv[j];
        }
        beta_piv[k] = s / a[k * p + k];
    }
    let mut beta = vec![0.0f64; p];
    for k in 0..p {
        beta[piv[k]] = beta_piv[k];
    }
    Ok(beta)
}

/// Exhaustive minimum-cost assignment: returns the permutation tau minimizing
/// `sum_x cost[tau(x)][x]`, with lexicographically smallest tau on ties.
///
/// Intended for K <= 10; factorial enumeration.
pub fn best_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    best_permutation_with_tiebreak(cost, None)
}

/// As [`best_permutation`], breaking primary-cost ties (within 1e-12 relative)
/// by a secondary cost matrix, then lexicographically.
pub fn best_permutation_with_tiebreak(
    primary: &[Vec<f64>],
    secondary: Option<&[Vec<f64>]>,
) -> Vec<usize> {
    let k = primary.len();
    assert!(k <= 10, "exhaustive permutation search needs K <= 10");
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    let mut best_secondary = f64::INFINITY;
    // Lexicographic enumeration so the first optimum found is the tie-break.
    loop {
        let c: f64 = (0..k).map(|x| primary[perm[x]][x]).sum();
        let tol = 1e-12 * (1.0 + best_cost.abs().min(c.abs()));
        if c < best_cost - tol {
            best_cost = c;
            best = perm.clone();
            best_secondary = secondary
                .map(|s| (0..k).map(|x| s[perm[x]][x]).sum())
                .unwrap_or(0.0);
        } else if (c - best_cost).abs() <= tol {
            if let Some(s) = secondary {
                let c2: f64 = (0..k).map(|x| s[perm[x]][x]).sum();
                if c2 < best_secondary - 1e-12 * (1.0 + best_secondary.abs()) {
                    best = perm.clone();
                    best_secondary = c2;
                }
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

/// Advances `perm` to its lexicographic successor; false when already last.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Ordinary least squares line: returns (slope, intercept) of y on x.
///
/// # Errors
/// [`Error::DegenerateLine`] with fewer than 2 points or no spread in x.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DegenerateLine);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let scale: f64 = xs.iter().map(|&x| x * x).sum::<f64>().max(1.0);
    if sxx <= 1e-12 * scale {
        return Err(Error::DegenerateLine);
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// SplitMix64 step, used to derive independent seeds for sub-tasks.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
