//! Output analysis for cyclic chains: sample moments, phase-indexed
//! autocovariances, multivariate batch means, effective sample sizes and
//! Hotelling confidence regions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::SampleMatrix;
use crate::numkit::{hotelling_t2_quantile, unit_ball_volume, Matrix, NumError, SpdMatrix};

pub const DEFAULT_KAPPA: f64 = 0.51;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("need at least {needed} samples, have {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("batch plan gives {a_n} batches; at least 2 are required")]
    TooFewBatches { a_n: usize },
    #[error("no phase-{phase} sample has a partner at lag {lag}")]
    InsufficientLag { phase: usize, lag: i64 },
    #[error("covariance estimate is not positive definite")]
    NonSpd,
    #[error("trace of the asymptotic covariance estimate is zero")]
    ZeroTrace,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerical(#[from] NumError),
}

/// A covariance estimate that may fail to be positive definite.
///
/// Batch means and sample covariances are only guaranteed SPD
/// asymptotically, so a degenerate value is flagged rather than raised.
#[derive(Clone, Debug, PartialEq)]
pub struct CovEstimate {
    matrix: Matrix,
    spd: Option<SpdMatrix>,
}

impl CovEstimate {
    pub fn new(mut matrix: Matrix) -> Self {
        matrix.symmetrize();
        let spd = SpdMatrix::new(matrix.clone()).ok();
        Self { matrix, spd }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_degenerate(&self) -> bool {
        self.spd.is_none()
    }

    pub fn spd(&self) -> Result<&SpdMatrix, EstimatorError> {
        self.spd.as_ref().ok_or(EstimatorError::NonSpd)
    }
}

/// Sample mean and the usual (denominator `n − 1`) sample covariance `Ψ̂`.
pub fn sample_mean_cov(s: &SampleMatrix) -> Result<(Vec<f64>, CovEstimate), EstimatorError> {
    let n = s.n();
    if n < 2 {
        return Err(EstimatorError::TooFewSamples { needed: 2, have: n });
    }
    let mean = s.mean();
    let mut cov = Matrix::zeros(s.d(), s.d());
    let mut centered = vec![0.0; s.d()];
    for row in s.rows() {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        cov.add_outer(&centered, &centered, 1.0);
    }
    Ok((mean, CovEstimate::new(cov.scale(1.0 / (n as f64 - 1.0)))))
}

/// Number and length of batches. `b_n = ⌊n^κ⌋` unless set explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n: usize,
    pub a_n: usize,
    pub b_n: usize,
    pub kappa: f64,
}

impl BatchPlan {
    pub fn new(n: usize, kappa: f64) -> Result<Self, EstimatorError> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(EstimatorError::InvalidArgument(format!(
                "kappa = {kappa} must lie in (0, 1)"
            )));
        }
        // the nudge keeps exact powers like 10^6^0.5 from flooring down
        let b_n = ((n as f64).powf(kappa) * (1.0 + 1e-12)).floor().max(1.0) as usize;
        Self::with_batch_len(n, b_n, kappa)
    }

    pub fn with_batch_len(n: usize, b_n: usize, kappa: f64) -> Result<Self, EstimatorError> {
        if b_n == 0 {
            return Err(EstimatorError::InvalidArgument(
                "batch length must be >= 1".into(),
            ));
        }
        let a_n = n / b_n;
        if a_n < 2 {
            return Err(EstimatorError::TooFewBatches { a_n });
        }
        Ok(Self { n, a_n, b_n, kappa })
    }

    /// Rows actually used, `a_n · b_n`.
    pub fn used(&self) -> usize {
        self.a_n * self.b_n
    }
}

fn check_plan(s: &SampleMatrix, plan: &BatchPlan) -> Result<(), EstimatorError> {
    if plan.a_n < 2 {
        return Err(EstimatorError::TooFewBatches { a_n: plan.a_n });
    }
    if plan.used() > s.n() {
        return Err(EstimatorError::TooFewSamples {
            needed: plan.used(),
            have: s.n(),
        });
    }
    Ok(())
}

/// `Σ̂ᴮᴹ = b_n/(a_n − 1) Σᵢ (θ̂⁽ⁱ⁾ − θ̂)(θ̂⁽ⁱ⁾ − θ̂)ᵀ` over the first `a_n·b_n` rows,
/// with `θ̂` the mean of those same rows.
pub fn batch_means_cov(s: &SampleMatrix, plan: &BatchPlan) -> Result<CovEstimate, EstimatorError> {
    check_plan(s, plan)?;
    let d = s.d();
    let overall = s.prefix_mean(plan.used());
    let mut acc = Matrix::zeros(d, d);
    let mut batch_mean = vec![0.0; d];
    for i in 0..plan.a_n {
        batch_mean.iter_mut().for_each(|v| *v = 0.0);
        for t in i * plan.b_n..(i + 1) * plan.b_n {
            for (m, x) in batch_mean.iter_mut().zip(s.row(t)) {
                *m += x;
            }
        }
        for (m, o) in batch_mean.iter_mut().zip(&overall) {
            *m = *m / plan.b_n as f64 - o;
        }
        acc.add_outer(&batch_mean, &batch_mean, 1.0);
    }
    Ok(CovEstimate::new(
        acc.scale(plan.b_n as f64 / (plan.a_n as f64 - 1.0)),
    ))
}

/// Empirical `cov(j, l)`: average of `(f(X_t) − θ̂)(f(X_{t+l}) − θ̂)ᵀ` over
/// rows `t` whose chain time is `≡ j (mod k)`, centered at the overall mean.
/// Negative lags return `cov(j, −l)ᵀ`.
///
/// Row `t` was produced by kernel `phase_of(t)`, so its chain time is
/// congruent to that phase mod `k`; `j = 0` selects the rows produced by `K_k`.
pub fn autocov(s: &SampleMatrix, j: usize, lag: i64) -> Result<Matrix, EstimatorError> {
    let mean = s.mean();
    autocov_centered(s, j, lag, &mean)
}

fn autocov_centered(
    s: &SampleMatrix,
    j: usize,
    lag: i64,
    mean: &[f64],
) -> Result<Matrix, EstimatorError> {
    let k = s.k();
    if j >= k {
        return Err(EstimatorError::InvalidArgument(format!(
            "phase index {j} outside 0..{k}"
        )));
    }
    let l = lag.unsigned_abs() as usize;
    let d = s.d();
    let n = s.n();
    if l >= n {
        return Err(EstimatorError::InsufficientLag { phase: j, lag });
    }
    let first = (0..k.min(n)).find(|&t| s.phase_of(t) % k == j);
    let Some(first) = first else {
        return Err(EstimatorError::InsufficientLag { phase: j, lag });
    };
    let mut acc = Matrix::zeros(d, d);
    let mut count = 0usize;
    let mut u = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut t = first;
    while t + l < n {
        for ((c, x), m) in u.iter_mut().zip(s.row(t)).zip(mean) {
            *c = x - m;
        }
        for ((c, x), m) in v.iter_mut().zip(s.row(t + l)).zip(mean) {
            *c = x - m;
        }
        acc.add_outer(&u, &v, 1.0);
        count += 1;
        t += k;
    }
    if count == 0 {
        return Err(EstimatorError::InsufficientLag { phase: j, lag });
    }
    let c = acc.scale(1.0 / count as f64);
    Ok(if lag < 0 { c.transpose() } else { c })
}

/// Truncated `Σ_{l=−L}^{L} Σ_j (1/k) cov(j, l)`. Slow; meant as a cross-check
/// on [`batch_means_cov`].
pub fn sigma_truncated_oracle(s: &SampleMatrix, max_lag: usize) -> Result<Matrix, EstimatorError> {
    if max_lag == 0 {
        return Err(EstimatorError::InvalidArgument(
            "max lag must be >= 1".into(),
        ));
    }
    let k = s.k();
    let mean = s.mean();
    let mut sigma = Matrix::zeros(s.d(), s.d());
    for j in 0..k {
        let c0 = autocov_centered(s, j, 0, &mean)?;
        sigma.add_assign_scaled(&c0, 1.0 / k as f64);
        for l in 1..=max_lag as i64 {
            let c = autocov_centered(s, j, l, &mean)?;
            // cov(j, −l) = cov(j, l)ᵀ
            sigma.add_assign_scaled(&c, 1.0 / k as f64);
            sigma.add_assign_scaled(&c.transpose(), 1.0 / k as f64);
        }
    }
    Ok(sigma)
}

/// `n (|Ψ̂| / |Σ̂|)^{1/d}`, via log-determinants.
pub fn ess(n: usize, psi_hat: &SpdMatrix, sigma_hat: &SpdMatrix) -> Result<f64, EstimatorError> {
    if psi_hat.dim() != sigma_hat.dim() {
        return Err(EstimatorError::InvalidArgument("dimension mismatch".into()));
    }
    let d = psi_hat.dim() as f64;
    Ok(n as f64 * ((psi_hat.log_det() - sigma_hat.log_det()) / d).exp())
}

/// `n · tr(Ψ̂) / tr(Σ̂)`.
pub fn tess(n: usize, psi_hat: &Matrix, sigma_hat: &Matrix) -> Result<f64, EstimatorError> {
    if psi_hat.rows() != sigma_hat.rows() {
        return Err(EstimatorError::InvalidArgument("dimension mismatch".into()));
    }
    let tr = sigma_hat.trace();
    if tr == 0.0 {
        return Err(EstimatorError::ZeroTrace);
    }
    Ok(n as f64 * psi_hat.trace() / tr)
}

/// `{x : (θ̂ − x)ᵀ Σ̂⁻¹ (θ̂ − x) < radius2}` with `radius2 = T²_{1−α, d, a_n − d} / n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceRegion {
    pub center: Vec<f64>,
    pub shape: SpdMatrix,
    pub radius2: f64,
    pub alpha: f64,
    pub n: usize,
    pub dof: usize,
}

impl ConfidenceRegion {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `T²` quantile used for the radius.
    pub fn t2(&self) -> f64 {
        self.radius2 * self.n as f64
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let diff: Vec<f64> = self.center.iter().zip(x).map(|(c, v)| c - v).collect();
        self.shape.inv_quad_form(&diff) < self.radius2
    }
}

pub fn confidence_region(
    s: &SampleMatrix,
    plan: &BatchPlan,
    alpha: f64,
) -> Result<ConfidenceRegion, EstimatorError> {
    let sigma = batch_means_cov(s, plan)?;
    region_from_parts(
        s.prefix_mean(plan.used()),
        sigma.spd()?.clone(),
        plan,
        alpha,
    )
}

/// Region from an already computed center and batch-means shape.
pub fn region_from_parts(
    center: Vec<f64>,
    shape: SpdMatrix,
    plan: &BatchPlan,
    alpha: f64,
) -> Result<ConfidenceRegion, EstimatorError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EstimatorError::InvalidArgument(format!(
            "alpha = {alpha} outside (0, 1)"
        )));
    }
    let d = center.len();
    let dof = plan
        .a_n
        .checked_sub(d)
        .ok_or(NumError::DegenerateDof { d, df: 0 })?;
    let t2 = hotelling_t2_quantile(1.0 - alpha, d, dof)?;
    Ok(ConfidenceRegion {
        center,
        shape,
        radius2: t2 / plan.used() as f64,
        alpha,
        n: plan.used(),
        dof,
    })
}

/// `2π^{d/2}/(dΓ(d/2)) · (T²/n)^{d/2} · |Σ̂|^{1/2}`.
pub fn region_volume(r: &ConfidenceRegion) -> f64 {
    let d = r.dim();
    let log_v =
        unit_ball_volume(d).ln() + 0.5 * d as f64 * r.radius2.ln() + 0.5 * r.shape.log_det();
    log_v.exp()
}

/// Everything the reports need from one sample matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub kappa: f64,
    pub a_n: usize,
    pub b_n: usize,
    pub mean: Vec<f64>,
    pub psi_hat: Matrix,
    pub sigma_bm: Matrix,
    pub ess: Option<f64>,
    pub tess: Option<f64>,
}

impl EstimatorReport {
    pub fn compute(s: &SampleMatrix, kappa: f64) -> Result<Self, EstimatorError> {
        let plan = BatchPlan::new(s.n(), kappa)?;
        let (mean, psi) = sample_mean_cov(s)?;
        let sigma = batch_means_cov(s, &plan)?;
        let ess = match (psi.spd(), sigma.spd()) {
            (Ok(p), Ok(q)) => Some(ess(s.n(), p, q)?),
            _ => None,
        };
        let tess = tess(s.n(), psi.matrix(), sigma.matrix()).ok();
        Ok(Self {
            n: s.n(),
            d: s.d(),
            k: s.k(),
            kappa,
            a_n: plan.a_n,
            b_n: plan.b_n,
            mean,
            psi_hat: psi.matrix().clone(),
            sigma_bm: sigma.matrix().clone(),
            ess,
            tess,
        })
    }
}
