//! Crate-wide error type.

use thiserror::Error;

/// Alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter or input validation failed; the message names the field.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Tolerance-based block clustering produced a non-transitive relation:
    /// `a ~ b` and `b ~ c` but not `a ~ c` (states are 0-based).
    #[error("block clustering is not transitive: states {a} ~ {b} and {b} ~ {c} but {a} !~ {c}; tighten or loosen the tolerance")]
    NonTransitiveBlocks { a: usize, b: usize, c: usize },

    /// Weighted least squares design had rank below the number of columns.
    #[error("rank-deficient least squares: effective rank {rank} of {needed} columns")]
    RankDeficient { rank: usize, needed: usize },

    /// Line fit over x-values with no spread.
    #[error("cannot fit a line: x-values are degenerate")]
    DegenerateLine,

    /// Brute-force path enumeration would exceed the instance cap.
    #[error("brute force instance too large: K^n = {paths} exceeds 10^7")]
    BruteForceTooLarge { paths: f64 },

    /// Not enough observations to initialize a fit.
    #[error("too few observations: n = {n} but initialization needs at least {needed}")]
    TooFewObservations { n: usize, needed: usize },

    /// A state received almost no posterior weight in the M-step.
    #[error("degenerate state {state}: posterior weight {weight:.3e} is below {min_weight:.1e}")]
    DegenerateState {
        state: usize,
        weight: f64,
        min_weight: f64,
    },

    /// Every restart of an EM fit failed.
    #[error("all {0} restarts failed; first failure: {1}")]
    AllRestartsFailed(usize, String),

    /// An operation needing per-step block labels got a trajectory without them.
    #[error("trajectory has no block labels")]
    MissingBlocks,

    /// The forgetting bound is vacuous without a positive transition floor.
    #[error("filter forgetting requires sigma_minus > 0")]
    SigmaMinusZero,

    /// A residual trend exceeded the tube bound it was checked against.
    #[error("residual trend of state {state} has sup {sup:.6} exceeding the bound {bound:.6}")]
    ResidualOutOfTube { state: usize, sup: f64, bound: f64 },

    /// Config file could not be parsed.
    #[error("config parse error in {path}: {detail}")]
    ConfigParse { path: String, detail: String },

    /// I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by invalid user input (configs, parameters,
    /// malformed data files) rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::ConfigParse { .. }
                | Error::TooFewObservations { .. }
                | Error::DegenerateLine
        )
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}
