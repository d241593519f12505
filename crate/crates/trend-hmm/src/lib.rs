//! Hidden Markov models whose Gaussian emissions are translated by state-specific
//! polynomial trends.
//!
//! The observation at time t is `Y_t = T_{X_t}(t) + Z_t`, where `X` is a Markov
//! chain on `{1..K}`, each state `x` carries a polynomial trend `T_x` of bounded
//! degree, and `Z_t` given `X_t = x` is centered Gaussian with variance `sigma_x^2`.
//!
//! The crate provides:
//! - [`model`]: parameter and trajectory types, simulation, and the block
//!   structure of a trend family (states whose trends differ by a constant).
//! - [`numerics`]: log-domain reductions, weighted least squares, permutation
//!   matching, line fitting.
//! - [`inference`]: log-domain forward/backward, likelihood, smoothing
//!   posteriors, and a brute-force enumeration oracle.
//! - [`estimation`]: EM maximum-likelihood fitting with restarts and state
//!   alignment for evaluation against a known truth.
//! - [`theory`]: block-augmented and homogenized likelihoods, de-trending,
//!   tube membership of fitted trends, Monte-Carlo limits of the normalized
//!   likelihood, and filter forgetting.
//! - [`experiments`]: config-driven simulation studies with CSV outputs.

pub mod error;
pub mod estimation;
pub mod experiments;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod theory;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
