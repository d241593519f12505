//! Domain types: polynomial trends, model parameters, trajectories, and the
//! block structure of a trend family.
//!
//! Trends are stored in the shifted-Legendre basis on u = t/n_scale. Raw
//! monomials in t are catastrophically ill-conditioned in least squares once
//! t reaches 1e5 at degree 4; the shifted-Legendre design stays well scaled.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{io_err, Error, Result};

/// Smallest admissible emission variance; EM floors variances here to avoid
/// collapse onto a single observation.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Coefficient of u^j in the shifted Legendre polynomial P~_k(u) = P_k(2u - 1):
/// (-1)^(k+j) C(k,j) C(k+j,j). Exact in f64 for the small degrees used here.
fn shifted_legendre_monomial(k: usize) -> Vec<f64> {
    let mut coeffs = vec![0.0f64; k + 1];
    for (j, c) in coeffs.iter_mut().enumerate() {
        let sign = if (k + j) % 2 == 0 { 1.0 } else { -1.0 };
        *c = sign * binomial(k, j) * binomial(k + j, j);
    }
    coeffs
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut v = 1.0f64;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// Fills `out[k] = P~_k(u)` for k = 0..out.len() by the three-term recurrence
/// P~_{k+1} = ((2k+1)(2u-1) P~_k - k P~_{k-1}) / (k+1).
pub(crate) fn shifted_legendre_row(u: f64, out: &mut [f64]) {
    let x = 2.0 * u - 1.0;
    if let Some(v) = out.get_mut(0) {
        *v = 1.0;
    }
    if let Some(v) = out.get_mut(1) {
        *v = x;
    }
    for k in 1..out.len().saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = ((2.0 * kf + 1.0) * x * out[k] - kf * out[k - 1]) / (kf + 1.0);
    }
}

/// One state's polynomial trend, stored in the shifted-Legendre basis over
/// rescaled time u = t/n_scale in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct TrendPoly {
    coeffs: Vec<f64>,
    n_scale: f64,
}

impl TrendPoly {
    /// Builds a trend from shifted-Legendre coefficients (ascending degree).
    pub fn new(coeffs: Vec<f64>, n_scale: f64) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Invalid(
                "trend needs at least one coefficient".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("trend coefficients must be finite".into()));
        }
        if !(n_scale > 0.0) || !n_scale.is_finite() {
            return Err(Error::Invalid(format!(
                "n_scale must be positive, got {n_scale}"
            )));
        }
        Ok(TrendPoly { coeffs, n_scale })
    }

    /// The zero trend with the given degree bound.
    pub fn zero(degree_bound: usize, n_scale: f64) -> Self {
        TrendPoly {
            coeffs: vec![0.0; degree_bound + 1],
            n_scale,
        }
    }

    /// Builds a trend from monomial coefficients in t (ascending degree):
    /// T(t) = sum_j c_j t^j.
    pub fn from_monomial(coeffs_t: &[f64], n_scale: f64) -> Result<Self> {
        if coeffs_t.is_empty() {
            return Err(Error::Invalid(
                "trend needs at least one coefficient".into(),
            ));
        }
        let d = coeffs_t.len() - 1;
        // Monomials in u = t/n_scale: u^j coefficient is c_j * n_scale^j.
        let mut v: Vec<f64> = coeffs_t
            .iter()
            .enumerate()
            .map(|(j, c)| c * n_scale.powi(j as i32))
            .collect();
        // Back substitution against the triangular basis-change matrix.
        let mut legendre = vec![0.0f64; d + 1];
        for k in (0..=d).rev() {
            let mono = shifted_legendre_monomial(k);
            legendre[k] = v[k] / mono[k];
            for j in 0..=k {
                v[j] -= legendre[k] * mono[j];
            }
        }
        TrendPoly::new(legendre, n_scale)
    }

    /// Monomial coefficients in t (ascending), basis-independent.
    pub fn to_monomial(&self) -> Vec<f64> {
        let d = self.degree_bound();
        let mut mono_u = vec![0.0f64; d + 1];
        for (k, &c) in self.coeffs.iter().enumerate() {
            for (j, &m) in shifted_legendre_monomial(k).iter().enumerate() {
                mono_u[j] += c * m;
            }
        }
        mono_u
            .iter()
            .enumerate()
            .map(|(j, c)| c / self.n_scale.powi(j as i32))
            .collect()
    }

    /// The same function expressed over a different rescaling horizon.
    pub fn rescaled(&self, n_scale: f64) -> Result<Self> {
        TrendPoly::from_monomial(&self.to_monomial(), n_scale)
    }

    pub fn degree_bound(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn n_scale(&self) -> f64 {
        self.n_scale
    }

    /// Evaluates T(t) by the three-term shifted-Legendre recurrence.
    pub fn eval(&self, t: f64) -> f64 {
        let u = t / self.n_scale;
        let x = 2.0 * u - 1.0;
        let mut acc = self.coeffs[0];
        if self.coeffs.len() == 1 {
            return acc;
        }
        let mut p_prev = 1.0f64;
        let mut p = x;
        acc += self.coeffs[1] * p;
        for k in 1..self.degree_bound() {
            let kf = k as f64;
            let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
            p_prev = p;
            p = p_next;
            acc += self.coeffs[k + 1] * p;
        }
        acc
    }
}

/// Full parameter theta = (K, pi, Q, variances, trends) with an optional
/// lower bound sigma_minus enforced on the transition matrix.
#[derive(Clone, Debug)]
pub struct ModelParams {
    n_states: usize,
    initial_dist: Vec<f64>,
    transition: Vec<Vec<f64>>,
    variances: Vec<f64>,
    trends: Vec<TrendPoly>,
    sigma_minus: f64,
}

impl ModelParams {
    pub fn new(
        initial_dist: Vec<f64>,
        transition: Vec<Vec<f64>>,
        variances: Vec<f64>,
        trends: Vec<TrendPoly>,
        sigma_minus: f64,
    ) -> Result<Self> {
        let k = trends.len();
        if k == 0 {
            return Err(Error::Invalid("model needs at least one state".into()));
        }
        if initial_dist.len() != k || transition.len() != k || variances.len() != k {
            return Err(Error::Invalid(format!(
                "inconsistent state counts: initial_dist {}, transition {}, variances {}, trends {}",
                initial_dist.len(),
                transition.len(),
                variances.len(),
                k
            )));
        }
        if !(0.0..=1.0 / k as f64).contains(&sigma_minus) {
            return Err(Error::Invalid(format!(
                "sigma_minus must lie in [0, 1/K] = [0, {:.6}], got {sigma_minus}",
                1.0 / k as f64
            )));
        }
        if initial_dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("initial_dist entries must be >= 0".into()));
        }
        let s: f64 = initial_dist.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "initial_dist sums to {s}, expected 1"
            )));
        }
        for (x, row) in transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Invalid(format!(
                    "transition row {x} has length {}",
                    row.len()
                )));
            }
            if row
                .iter()
                .any(|&q| !q.is_finite() || q < 0.0 || q < sigma_minus - 1e-12)
            {
                return Err(Error::Invalid(format!(
                    "transition row {x} has an entry below sigma_minus = {sigma_minus}"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "transition row {x} sums to {s}, expected 1"
                )));
            }
        }
        if variances
            .iter()
            .any(|&v| !v.is_finite() || v < VARIANCE_FLOOR)
        {
            return Err(Error::Invalid(format!(
                "variances must be finite and >= {VARIANCE_FLOOR}"
            )));
        }
        Ok(ModelParams {
            n_states: k,
            initial_dist,
            transition,
            variances,
            trends,
            sigma_minus,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn trends(&self) -> &[TrendPoly] {
        &self.trends
    }

    pub fn trend(&self, x: usize) -> &TrendPoly {
        &self.trends[x]
    }

    pub fn sigma_minus(&self) -> f64 {
        self.sigma_minus
    }

    /// Relabels states: state x of the result is state `perm[x]` of self.
    pub fn permuted(&self, perm: &[usize]) -> ModelParams {
        assert_eq!(perm.len(), self.n_states);
        let gather = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        ModelParams {
            n_states: self.n_states,
            initial_dist: gather(&self.initial_dist),
            transition: perm.iter().map(|&i| gather(&self.transition[i])).collect(),
            variances: gather(&self.variances),
            trends: perm.iter().map(|&i| self.trends[i].clone()).collect(),
            sigma_minus: self.sigma_minus,
        }
    }
}

/// A simulated or loaded trajectory. Observation at index i is Y_{i+1};
/// times are the integers 1..=n.
#[derive(Clone, Debug)]
pub struct Trajectory {
    observations: Vec<f64>,
    hidden_states: Option<Vec<usize>>,
    blocks: Option<Vec<usize>>,
    seed: Option<u64>,
}

impl Trajectory {
    pub fn new(
        observations: Vec<f64>,
        hidden_states: Option<Vec<usize>>,
        blocks: Option<Vec<usize>>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let n = observations.len();
        if n == 0 {
            return Err(Error::Invalid(
                "trajectory must have at least one observation".into(),
            ));
        }
        if let Some(x) = &hidden_states {
            if x.len() != n {
                return Err(Error::Invalid("hidden_states length mismatch".into()));
            }
        }
        if let Some(b) = &blocks {
            if b.len() != n {
                return Err(Error::Invalid("blocks length mismatch".into()));
            }
        }
        Ok(Trajectory {
            observations,
            hidden_states,
            blocks,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn hidden_states(&self) -> Option<&[usize]> {
        self.hidden_states.as_deref()
    }

    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// The first n observations as a new trajectory.
    pub fn prefix(&self, n: usize) -> Result<Trajectory> {
        if n == 0 || n > self.len() {
            return Err(Error::Invalid(format!(
                "prefix length {n} out of range 1..={}",
                self.len()
            )));
        }
        Ok(Trajectory {
            observations: self.observations[..n].to_vec(),
            hidden_states: self.hidden_states.as_ref().map(|v| v[..n].to_vec()),
            blocks: self.blocks.as_ref().map(|v| v[..n].to_vec()),
            seed: self.seed,
        })
    }

    /// Writes `t,y[,x,b]` CSV. States and blocks are 1-based in the file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("t,y");
        if self.hidden_states.is_some() {
            out.push_str(",x");
        }
        if self.blocks.is_some() {
            out.push_str(",b");
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", i + 1, self.observations[i]));
            if let Some(x) = &self.hidden_states {
                out.push_str(&format!(",{}", x[i] + 1));
            }
            if let Some(b) = &self.blocks {
                out.push_str(&format!(",{}", b[i] + 1));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }

    /// Reads a `t,y[,x,b]` CSV written by [`Trajectory::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid(format!("{}: empty file", path.display())))?
            .map_err(|e| io_err(path, e))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols[0] != "t" || cols[1] != "y" {
            return Err(Error::Invalid(format!(
                "{}: header must start with t,y (got {header:?})",
                path.display()
            )));
        }
        let x_col = cols.iter().position(|&c| c == "x");
        let b_col = cols.iter().position(|&c| c == "b");
        let mut observations = Vec::new();
        let mut hidden = x_col.map(|_| Vec::new());
        let mut blocks = b_col.map(|_| Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Invalid(format!(
                    "{}: line {} has {} fields, expected {}",
                    path.display(),
                    lineno + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let t: usize = fields[0].parse().map_err(|_| {
                Error::Invalid(format!("{}: bad time {:?}", path.display(), fields[0]))
            })?;
            if t != observations.len() + 1 {
                return Err(Error::Invalid(format!(
                    "{}: times must be 1,2,..., got {t} at row {}",
                    path.display(),
                    observations.len() + 1
                )));
            }
            let y: f64 = fields[1].parse().map_err(|_| {
                Error::Invalid(format!(
                    "{}: bad observation {:?}",
                    path.display(),
                    fields[1]
                ))
            })?;
            observations.push(y);
            if let (Some(col), Some(v)) = (x_col, hidden.as_mut()) {
                let x: usize = fields[col].parse().map_err(|_| {
                    Error::Invalid(format!("{}: bad state {:?}", path.display(), fields[col]))
                })?;
                if x == 0 {
                    return Err(Error::Invalid(format!(
                        "{}: states are 1-based",
                        path.display()
                    )));
                }
                v.push(x - 1);
            }
            if let (Some(col), Some(v)) = (b_col, blocks.as_mut()) {
                let b: usize = fields[col].parse().map_err(|_| {
                    Error::Invalid(format!("{}: bad block {:?}", path.display(), fields[col]))
                })?;
                if b == 0 {
                    return Err(Error::Invalid(format!(
                        "{}: blocks are 1-based",
                        path.display()
                    )));
                }
                v.push(b - 1);
            }
        }
        Trajectory::new(observations, hidden, blocks, None)
    }
}

/// Simulates X_1 ~ pi, X_{t+1} | X_t ~ Q(X_t, .), Y_t = T_{X_t}(t) + sigma_{X_t} eps_t.
///
/// Deterministic given the seed. Hidden states and block labels (from
/// [`compute_blocks`] at the default tolerance) are populated.
pub fn simulate(params: &ModelParams, n: usize, seed: u64) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::Invalid("simulation length must be >= 1".into()));
    }
    let grid = default_block_grid(n as f64);
    let tol = default_block_tolerance(params, &grid);
    let blocks = compute_blocks(params, tol, &grid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.n_states();
    let mut x = sample_categorical(params.initial_dist(), rng.gen::<f64>());
    let mut observations = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for t in 1..=n {
        if t > 1 {
            x = sample_categorical(&params.transition()[x], rng.gen::<f64>());
        }
        debug_assert!(x < k);
        let eps: f64 = StandardNormal.sample(&mut rng);
        observations.push(params.trend(x).eval(t as f64) + params.variances()[x].sqrt() * eps);
        hidden.push(x);
        labels.push(blocks.block_of(x));
    }
    Trajectory::new(observations, Some(hidden), Some(labels), Some(seed))
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A stationary distribution of Q, by damped power iteration. Meaningful for
/// ergodic chains; for reducible ones it returns one invariant distribution.
pub fn stationary_dist(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..100_000 {
        let mut next = vec![0.0f64; k];
        for (x, row) in transition.iter().enumerate() {
            for (y, &q) in row.iter().enumerate() {
                next[y] += pi[x] * q;
            }
        }
        let mut delta = 0.0f64;
        for y in 0..k {
            next[y] = 0.5 * next[y] + 0.5 * pi[y];
            delta += (next[y] - pi[y]).abs();
        }
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    pi
}

/// Partition of states into blocks (trends equal up to a constant), with the
/// reference trend and per-state offset of each block.
#[derive(Clone, Debug)]
pub struct BlockStructure {
    block_of_state: Vec<usize>,
    reference_trend: Vec<TrendPoly>,
    offsets: Vec<f64>,
    tolerance: f64,
}

impl BlockStructure {
    pub fn n_states(&self) -> usize {
        self.block_of_state.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.reference_trend.len()
    }

    /// Block id of a state; ids are 0-based, ordered by minimal member state.
    pub fn block_of(&self, state: usize) -> usize {
        self.block_of_state[state]
    }

    pub fn block_map(&self) -> &[usize] {
        &self.block_of_state
    }

    /// Reference trend of a block: the trend of its minimal-index member.
    pub fn reference(&self, block: usize) -> &TrendPoly {
        &self.reference_trend[block]
    }

    /// Offset Delta(x) of a state from its block's reference trend.
    pub fn offset(&self, state: usize) -> f64 {
        self.offsets[state]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// max_x |Delta(x)|.
    pub fn max_offset_abs(&self) -> f64 {
        self.offsets.iter().map(|d| d.abs()).fold(0.0, f64::max)
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// Default decision grid: 256 equispaced times in [1, n].
pub fn default_block_grid(n: f64) -> Vec<f64> {
    let m = 256usize;
    (0..m)
        .map(|i| 1.0 + (n - 1.0) * i as f64 / (m - 1) as f64)
        .collect()
}

/// Default tolerance: 1e-6 * (1 + max |T_x| over the grid).
pub fn default_block_tolerance(params: &ModelParams, grid: &[f64]) -> f64 {
    let max_abs = params
        .trends()
        .iter()
        .flat_map(|tr| grid.iter().map(move |&t| tr.eval(t).abs()))
        .fold(0.0f64, f64::max);
    1e-6 * (1.0 + max_abs)
}

/// Partitions states by the relation "T_x - T_x' is constant within
/// `tolerance` on the grid".
///
/// The offset Delta(x) is the grid mean of T_x - reference; for trends whose
/// difference is exactly constant this is that constant.
///
/// # Errors
/// [`Error::NonTransitiveBlocks`] when the tolerance relation is not an
/// equivalence (merging would silently change every downstream offset).
pub fn compute_blocks(
    params: &ModelParams,
    tolerance: f64,
    grid: &[f64],
) -> Result<BlockStructure> {
    if grid.is_empty() {
        return Err(Error::Invalid("block decision grid is empty".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Invalid(format!(
            "tolerance must be >= 0, got {tolerance}"
        )));
    }
    let k = params.n_states();
    let values: Vec<Vec<f64>> = params
        .trends()
        .iter()
        .map(|tr| grid.iter().map(|&t| tr.eval(t)).collect())
        .collect();

    // spread(x, y) = sup over grid of |(T_x - T_y) - mean(T_x - T_y)|.
    let spread = |x: usize, y: usize| -> (f64, f64) {
        let diffs: Vec<f64> = values[x]
            .iter()
            .zip(&values[y])
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sup = diffs.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max);
        (sup, mean)
    };

    let mut related = vec![vec![false; k]; k];
    let mut mean_diff = vec![vec![0.0f64; k]; k];
    for x in 0..k {
        related[x][x] = true;
        for y in (x + 1)..k {
            let (sup, mean) = spread(x, y);
            related[x][y] = sup <= tolerance;
            related[y][x] = related[x][y];
            mean_diff[x][y] = mean;
            mean_diff[y][x] = -mean;
        }
    }
    for a in 0..k {
        for b in 0..k {
            if !related[a][b] {
                continue;
            }
            for c in 0..k {
                if related[b][c] && !related[a][c] {
                    return Err(Error::NonTransitiveBlocks { a, b, c });
                }
            }
        }
    }

    // Transitive, so components are equivalence classes; ids follow the order
    // of minimal members, and the reference trend is the minimal member's.
    let mut block_of_state = vec![usize::MAX; k];
    let mut reference_trend = Vec::new();
    let mut reference_state = Vec::new();
    for x in 0..k {
        if block_of_state[x] != usize::MAX {
            continue;
        }
        let id = reference_trend.len();
        reference_trend.push(params.trend(x).clone());
        reference_state.push(x);
        for y in x..k {
            if related[x][y] {
                block_of_state[y] = id;
            }
        }
    }
    let offsets: Vec<f64> = (0..k)
        .map(|x| {
            let r = reference_state[block_of_state[x]];
            if x == r {
                0.0
            } else {
                mean_diff[x][r]
            }
        })
        .collect();
    Ok(BlockStructure {
        block_of_state,
        reference_trend,
        offsets,
        tolerance,
    })
}

/// E(t): the smallest distance at time t between reference trends of distinct
/// blocks; +inf for a single block.
pub fn block_separation(blocks: &BlockStructure, t: f64) -> f64 {
    let nb = blocks.n_blocks();
    if nb < 2 {
        return f64::INFINITY;
    }
    let mut min = f64::INFINITY;
    for b1 in 0..nb {
        for b2 in (b1 + 1)..nb {
            let d = (blocks.reference(b1).eval(t) - blocks.reference(b2).eval(t)).abs();
            min = min.min(d);
        }
    }
    min
}
