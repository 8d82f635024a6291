//! Seeded random streams and the samplers the Gibbs kernels need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{NumError, SpdMatrix};

/// The stream type used throughout the crate.
pub type RngStream = ChaCha8Rng;

/// Stream for replication `index` of an experiment seeded with `seed`.
///
/// Distinct indices select disjoint ChaCha streams under the same key, so
/// replication `i` draws the same numbers no matter how work is scheduled.
pub fn stream(seed: u64, index: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform on `(0, 1]`.
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Gamma(shape, rate) draw: Marsaglia–Tsang for `shape >= 1`, and the
/// `Gamma(shape + 1) · U^{1/shape}` boost below that.
pub fn gamma_sample<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64, NumError> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(NumError::Domain(format!(
            "gamma needs positive finite shape and rate, got ({shape}, {rate})"
        )));
    }
    if shape < 1.0 {
        let boosted = standard_gamma_ge1(shape + 1.0, rng);
        let u = open_uniform(rng);
        return Ok(boosted * u.powf(1.0 / shape) / rate);
    }
    Ok(standard_gamma_ge1(shape, rng) / rate)
}

fn standard_gamma_ge1<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = std_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_uniform(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `mean + L z` with `z` i.i.d. standard normal and `L` the cached Cholesky factor.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &[f64],
    cov: &SpdMatrix,
    rng: &mut R,
) -> Result<Vec<f64>, NumError> {
    let n = cov.dim();
    if mean.len() != n {
        return Err(NumError::DimensionMismatch(format!(
            "mean has length {}, covariance is {n}x{n}",
            mean.len()
        )));
    }
    let z: Vec<f64> = (0..n).map(|_| std_normal(rng)).collect();
    let l = cov.cholesky();
    Ok((0..n)
        .map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
        .collect())
}
