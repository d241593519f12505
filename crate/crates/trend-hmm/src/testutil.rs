//! Shared fixtures for unit tests: random model generators and the two
//! reference generators used across modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{simulate, ModelParams, Trajectory, TrendPoly};

/// Random valid parameters: Q rows respect sigma_minus, trends have random
/// shifted-Legendre coefficients of the given degree bound.
pub(crate) fn random_params(
    rng: &mut ChaCha8Rng,
    k: usize,
    degree_bound: usize,
    n_scale: f64,
    sigma_minus: f64,
) -> ModelParams {
    let simplex = |rng: &mut ChaCha8Rng, floor: f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter()
            .map(|w| floor + (1.0 - k as f64 * floor) * w / s)
            .collect()
    };
    let initial_dist = simplex(rng, 0.0);
    let transition: Vec<Vec<f64>> = (0..k).map(|_| simplex(rng, sigma_minus)).collect();
    let variances: Vec<f64> = (0..k).map(|_| rng.gen_range(0.3f64..3.0)).collect();
    let trends: Vec<TrendPoly> = (0..k)
        .map(|_| {
            let coeffs: Vec<f64> = (0..=degree_bound)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            TrendPoly::new(coeffs, n_scale).unwrap()
        })
        .collect();
    ModelParams::new(initial_dist, transition, variances, trends, sigma_minus).unwrap()
}

/// A simulated trajectory with a seed drawn from the given rng.
pub(crate) fn random_trajectory(
    rng: &mut ChaCha8Rng,
    params: &ModelParams,
    n: usize,
) -> Trajectory {
    simulate(params, n, rng.gen()).unwrap()
}

/// Three-state generator with two quadratic trends differing by a constant
/// and one separate quadratic; variances (5, 10, 15).
pub(crate) fn example_quadratic_params(n_scale: f64) -> ModelParams {
    let t1 = [1.0, 2.0e-4, 1.0e-8];
    let t2 = [-4.0, 2.0e-4, 1.0e-8];
    let t3 = [3.0, 6.0e-4, 3.0e-8];
    ModelParams::new(
        vec![1.0 / 3.0; 3],
        vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.1, 0.8],
        ],
        vec![5.0, 10.0, 15.0],
        vec![
            TrendPoly::from_monomial(&t1, n_scale).unwrap(),
            TrendPoly::from_monomial(&t2, n_scale).unwrap(),
            TrendPoly::from_monomial(&t3, n_scale).unwrap(),
        ],
        0.0,
    )
    .unwrap()
}

/// Two-state generator with a flat trend and a parabola dipping to -1 at
/// mid-sample; variances (1, 2).
pub(crate) fn example_vshape_params(n_scale: f64) -> ModelParams {
    ModelParams::new(
        vec![0.5, 0.5],
        vec![vec![0.7, 0.3], vec![0.2, 0.8]],
        vec![1.0, 2.0],
        vec![
            TrendPoly::zero(2, n_scale),
            TrendPoly::from_monomial(&[2.0, -1.2e-3, 1.2e-7], n_scale).unwrap(),
        ],
        0.0,
    )
    .unwrap()
}
