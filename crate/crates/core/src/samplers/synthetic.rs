//! Small chains with known asymptotic covariance, used to check the estimators.

use rand::Rng;

use super::SamplerError;
use crate::chain::{CyclicSampler, StepError};
use crate::numkit::std_normal;

/// Two-phase sign chain on `{−1, +1}`: kernel 1 flips with probability `a`,
/// kernel 2 with probability `b`. Uniform is stationary for both kernels and
/// `f` is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipChain {
    a: f64,
    b: f64,
}

impl FlipChain {
    pub fn new(a: f64, b: f64) -> Result<Self, SamplerError> {
        if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
            return Err(SamplerError::InvalidSpec(format!(
                "flip probabilities must lie in (0, 1), got ({a}, {b})"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn probs(&self) -> (f64, f64) {
        (self.a, self.b)
    }
}

pub fn make_flip_chain(a: f64, b: f64) -> Result<FlipChain, SamplerError> {
    FlipChain::new(a, b)
}

impl CyclicSampler for FlipChain {
    type State = f64;

    fn cycle_len(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        1
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut f64,
        phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError> {
        let p = if phase == 1 { self.a } else { self.b };
        if rng.random::<f64>() < p {
            *state = -*state;
        }
        Ok(())
    }

    fn observe(&self, state: &f64, out: &mut [f64]) {
        out[0] = *state;
    }
}

/// Gaussian AR(1), `x' = φ x + σ e`, as a homogeneous (`k = 1`) chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ar1Chain {
    phi: f64,
    sigma: f64,
}

impl Ar1Chain {
    pub fn new(phi: f64, sigma: f64) -> Result<Self, SamplerError> {
        if !(phi.abs() < 1.0) || !(sigma > 0.0) {
            return Err(SamplerError::InvalidSpec(format!(
                "need |phi| < 1 and sigma > 0, got ({phi}, {sigma})"
            )));
        }
        Ok(Self { phi, sigma })
    }

    /// A draw from the stationary law.
    pub fn stationary_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sigma / (1.0 - self.phi * self.phi).sqrt() * std_normal(rng)
    }
}

impl CyclicSampler for Ar1Chain {
    type State = f64;

    fn cycle_len(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        1
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut f64,
        _phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError> {
        *state = self.phi * *state + self.sigma * std_normal(rng);
        Ok(())
    }

    fn observe(&self, state: &f64, out: &mut [f64]) {
        out[0] = *state;
    }
}
