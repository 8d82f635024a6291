//! Uniform distribution on the area under a unimodal curve, sampled by a
//! modified deterministic-scan Gibbs sampler: `k1` cheap y-axis steps per
//! cycle, then one x-axis step that needs two root solves.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use super::{Observable, SamplerError};
use crate::chain::{CyclicSampler, StepError};

pub const ROOT_MAX_ITER: usize = 200;
pub const ROOT_X_TOL: f64 = 1e-12;

/// `S = {(x1, x2): 0 ≤ x2 ≤ h(x1)}` for a unimodal `h` vanishing at both ends of its support.
#[derive(Clone)]
pub struct CurveRegion {
    h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    x_lo: f64,
    x_hi: f64,
    mode: f64,
    k1: usize,
}

impl fmt::Debug for CurveRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CurveRegion")
            .field("x_lo", &self.x_lo)
            .field("x_hi", &self.x_hi)
            .field("mode", &self.mode)
            .field("k1", &self.k1)
            .finish()
    }
}

impl CurveRegion {
    pub fn new(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        x_lo: f64,
        x_hi: f64,
        mode: f64,
        k1: usize,
    ) -> Result<Self, SamplerError> {
        if k1 == 0 {
            return Err(SamplerError::InvalidSpec("k1 must be >= 1".into()));
        }
        if !(x_lo < mode && mode < x_hi) {
            return Err(SamplerError::InvalidSpec(format!(
                "need x_lo < mode < x_hi, got {x_lo}, {mode}, {x_hi}"
            )));
        }
        let top = h(mode);
        if !(top > 0.0 && top.is_finite()) {
            return Err(SamplerError::InvalidSpec(format!(
                "h(mode) = {top} must be positive"
            )));
        }
        for x in [x_lo, x_hi] {
            if h(x).abs() > 1e-9 * top {
                return Err(SamplerError::InvalidSpec(format!(
                    "h({x}) = {} must vanish at the support ends",
                    h(x)
                )));
            }
        }
        Ok(Self {
            h: Arc::new(h),
            x_lo,
            x_hi,
            mode,
            k1,
        })
    }

    /// `h(x) = 2x + 1 − eˣ` on `[0, x*]` with `e^{x*} = 2x* + 1`, mode `ln 2`.
    pub fn exp_curve(k1: usize) -> Result<Self, SamplerError> {
        let h = |x: f64| 2.0 * x + 1.0 - x.exp();
        // h is positive at 1 and negative at 2
        let (mut lo, mut hi) = (1.0_f64, 2.0_f64);
        while hi - lo > 0.0 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::new(h, 0.0, lo, std::f64::consts::LN_2, k1)
    }

    pub fn h(&self, x: f64) -> f64 {
        (self.h)(x)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.x_lo, self.x_hi)
    }

    pub fn mode(&self) -> f64 {
        self.mode
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn with_k1(&self, k1: usize) -> Result<Self, SamplerError> {
        if k1 == 0 {
            return Err(SamplerError::InvalidSpec("k1 must be >= 1".into()));
        }
        Ok(Self { k1, ..self.clone() })
    }

    /// `E[x1 · x2]` under the uniform distribution on the region, by quadrature.
    pub fn mean_x1x2(&self) -> f64 {
        let (a, b) = (self.x_lo, self.x_hi);
        let num = crate::numkit::adaptive_simpson(&|x| x * self.h(x).powi(2) / 2.0, a, b, 1e-12);
        let den = crate::numkit::adaptive_simpson(&|x| self.h(x), a, b, 1e-12);
        num / den
    }

    pub fn height(&self) -> f64 {
        self.h(self.mode)
    }

    /// `{x1 : h(x1) ≥ level} = [r_l, r_r]`, found by bisection on both sides of the mode.
    ///
    /// The returned endpoints sit on the side of each bracket where
    /// `h ≤ level`, so `h(r_l) ≤ level ≤ h(r_l + tol)` and likewise at `r_r`.
    pub fn level_interval(&self, level: f64) -> Result<(f64, f64), StepError> {
        if !(0.0..=self.height()).contains(&level) {
            return Err(StepError::RootFailure {
                level,
                iterations: 0,
            });
        }
        let left =
            bisect(|x| self.h(x) <= level, self.x_lo, self.mode).ok_or(StepError::RootFailure {
                level,
                iterations: ROOT_MAX_ITER,
            })?;
        let right = bisect(|x| self.h(x) > level, self.mode, self.x_hi)
            .map(|(_, hi)| hi)
            .ok_or(StepError::RootFailure {
                level,
                iterations: ROOT_MAX_ITER,
            })?;
        Ok((left.0, right))
    }
}

/// Shrinks `[lo, hi]` keeping `below(lo)` true and `below(hi)` false
/// (`below` is only evaluated at interior points). Returns the final bracket,
/// or `None` if the width is still above tolerance after the iteration cap.
fn bisect(below: impl Fn(f64) -> bool, mut lo: f64, mut hi: f64) -> Option<(f64, f64)> {
    for _ in 0..ROOT_MAX_ITER {
        if hi - lo <= ROOT_X_TOL {
            return Some((lo, hi));
        }
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (hi - lo <= ROOT_X_TOL).then_some((lo, hi))
}

/// Draws `x2' ~ U[0, h(x1)]`, keeping `x1`.
pub fn y_step<R: Rng + ?Sized>(
    region: &CurveRegion,
    (x1, _x2): (f64, f64),
    rng: &mut R,
) -> Result<(f64, f64), StepError> {
    let top = region.h(x1);
    if !(top >= 0.0) {
        return Err(StepError::InvalidState(format!(
            "h({x1}) = {top} is negative"
        )));
    }
    Ok((x1, top * rng.random::<f64>()))
}

/// Draws `x1' ~ U[r_l, r_r]` where `[r_l, r_r] = {x1 : h(x1) ≥ x2}`, keeping `x2`.
pub fn x_step<R: Rng + ?Sized>(
    region: &CurveRegion,
    (_x1, x2): (f64, f64),
    rng: &mut R,
) -> Result<(f64, f64), StepError> {
    let (lo, hi) = region.level_interval(x2)?;
    Ok((lo + (hi - lo) * rng.random::<f64>(), x2))
}

/// The cyclic sampler: phases `1..=k1` are y-steps, phase `k1 + 1` is the x-step.
#[derive(Clone)]
pub struct CurveSampler {
    region: CurveRegion,
    observable: Observable<(f64, f64)>,
}

impl CurveSampler {
    /// Default `f(x1, x2) = x1 · x2`.
    pub fn new(region: CurveRegion) -> Self {
        Self {
            region,
            observable: Observable::new(1, |s: &(f64, f64), out: &mut [f64]| out[0] = s.0 * s.1),
        }
    }

    pub fn with_observable(mut self, observable: Observable<(f64, f64)>) -> Self {
        self.observable = observable;
        self
    }

    pub fn region(&self) -> &CurveRegion {
        &self.region
    }

    /// `(mode, h(mode)/2)`.
    pub fn initial_state(&self) -> (f64, f64) {
        (self.region.mode, 0.5 * self.region.height())
    }
}

/// Same as [`CurveSampler::new`].
pub fn make_curve_sampler(region: CurveRegion) -> CurveSampler {
    CurveSampler::new(region)
}

impl CyclicSampler for CurveSampler {
    type State = (f64, f64);

    fn cycle_len(&self) -> usize {
        self.region.k1 + 1
    }

    fn dim(&self) -> usize {
        self.observable.dim()
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut (f64, f64),
        phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError> {
        *state = if phase <= self.region.k1 {
            y_step(&self.region, *state, rng)?
        } else {
            x_step(&self.region, *state, rng)?
        };
        Ok(())
    }

    fn observe(&self, state: &(f64, f64), out: &mut [f64]) {
        self.observable.eval(state, out)
    }
}
