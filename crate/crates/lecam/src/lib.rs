//! Numerical toolkit for comparing three nonparametric experiments on [0,1]:
//! iid samples from a density, a Poisson point process with intensity n*f,
//! and Gaussian white noise with drift 2*sqrt(f). The crate builds the
//! constructive coupling between them (adaptive partition, Haar multiscale
//! counts, smoothed quantile transform), computes the divergence budget that
//! controls the Le Cam deficiency, and runs the Bayes-risk experiments that
//! separate the Poisson and Gaussian models from below.
//!
//! Everything is deterministic given a master seed. Monte Carlo routines
//! derive per-task seeds so that parallel execution does not change results.

pub mod coupling;
pub mod divergences;
pub mod estimators;
pub mod experiments;
pub mod funcspace;
pub mod haar;
pub mod lowerbound;
pub mod partition;
pub mod quad;
pub mod rng;
pub mod special;

/// Library error type. `Config` is a caller mistake (bad parameters, bad
/// descriptors), `Numeric` is a violated numerical contract detected at run
/// time (inversion ambiguity, corrupt coefficient tensors, quadrature
/// failure).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
