//! Reference samplers: the area-under-curve modified-scan Gibbs sampler,
//! the Bayesian linear mixed model Gibbs sampler, and synthetic chains
//! with closed-form asymptotic covariance.

mod curve;
mod lmm;
mod synthetic;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use curve::{make_curve_sampler, x_step, y_step, CurveRegion, CurveSampler};
pub use lmm::{
    load_orthodont, make_lmm_sampler, orthodont, parse_orthodont, LmmModel, LmmSampler, LmmState,
};
pub use synthetic::{make_flip_chain, Ar1Chain, FlipChain};

use crate::numkit::NumError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("invalid sampler specification: {0}")]
    InvalidSpec(String),
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("missing columns: {}", missing.join(", "))]
    Schema { missing: Vec<String> },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Numerical(#[from] NumError),
}

type ObserveFn<S> = Arc<dyn Fn(&S, &mut [f64]) + Send + Sync>;

/// The function `f: state → ℝᵈ` whose stationary mean is being estimated.
pub struct Observable<S> {
    dim: usize,
    f: ObserveFn<S>,
}

impl<S> Observable<S> {
    pub fn new(dim: usize, f: impl Fn(&S, &mut [f64]) + Send + Sync + 'static) -> Self {
        assert!(dim >= 1, "observable dimension must be >= 1");
        Self {
            dim,
            f: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, state: &S, out: &mut [f64]) {
        (self.f)(state, out)
    }
}

impl<S> Clone for Observable<S> {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            f: Arc::clone(&self.f),
        }
    }
}

impl<S> fmt::Debug for Observable<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observable(dim = {})", self.dim)
    }
}
