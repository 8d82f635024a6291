//! Split-chain regeneration for kernels with an explicit one-step
//! minorization `K_U(u, ·) ≥ h(u) μ(·)`.
//!
//! The split chain is realized by drawing each bell `δ_t` after the
//! transition `U_t → U_{t+1}` with success probability
//! `r(U_t, U_{t+1}) = h(U_t) μ(U_{t+1}) / K_U(U_t, U_{t+1})`.

use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::numkit::open_uniform;

pub const MIN_TOURS: usize = 1000;
const RATIO_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegenError {
    #[error("regeneration ratio r = {ratio} at transition {t} is outside [0, 1]")]
    RatioOutOfRange { t: usize, ratio: f64 },
    #[error("no regeneration in the run; h is too small on the visited states")]
    NoRegeneration,
    #[error("{have} complete tours, at least {needed} required")]
    InsufficientTours { have: usize, needed: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub trait MinorizedKernel {
    type State: Clone;

    /// Draw `U_{t+1} ~ K_U(u, ·)`.
    fn step<R: Rng + ?Sized>(&self, u: &Self::State, rng: &mut R) -> Self::State;

    /// Draw from the minorizing measure `μ`.
    fn sample_mu<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    /// The small function `h(u) ∈ [0, 1]`.
    fn small_fn(&self, u: &Self::State) -> f64;

    /// `r(u, v) = h(u) μ(v) / K_U(u, v)`.
    fn ratio(&self, u: &Self::State, v: &Self::State) -> f64;
}

/// Finite-state chain with a user-supplied `(h, μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMinorized {
    p: Vec<Vec<f64>>,
    h: Vec<f64>,
    mu: Vec<f64>,
}

impl FiniteMinorized {
    /// Constant `h ≡ s = Σ_v min_u P(u, v)` and `μ(v) = min_u P(u, v) / s`.
    pub fn from_stochastic(p: Vec<Vec<f64>>) -> Result<Self, RegenError> {
        check_stochastic(&p)?;
        let m = p.len();
        let col_min: Vec<f64> = (0..m)
            .map(|v| p.iter().map(|row| row[v]).fold(f64::INFINITY, f64::min))
            .collect();
        let s: f64 = col_min.iter().sum();
        let mu = if s > 0.0 {
            col_min.iter().map(|c| c / s).collect()
        } else {
            vec![1.0 / m as f64; m]
        };
        Ok(Self {
            p,
            h: vec![s; m],
            mu,
        })
    }

    /// Arbitrary `(h, μ)`; the minorization itself is only checked while running.
    pub fn with_minorization(
        p: Vec<Vec<f64>>,
        h: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self, RegenError> {
        check_stochastic(&p)?;
        if h.len() != p.len() || mu.len() != p.len() {
            return Err(RegenError::InvalidArgument(
                "h and mu must match the state count".into(),
            ));
        }
        if h.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(RegenError::InvalidArgument(
                "h must take values in [0, 1]".into(),
            ));
        }
        if mu.iter().any(|x| *x < 0.0) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(RegenError::InvalidArgument(
                "mu must be a probability vector".into(),
            ));
        }
        Ok(Self { p, h, mu })
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
}

fn check_stochastic(p: &[Vec<f64>]) -> Result<(), RegenError> {
    let m = p.len();
    if m == 0 {
        return Err(RegenError::InvalidArgument(
            "empty transition matrix".into(),
        ));
    }
    for (i, row) in p.iter().enumerate() {
        if row.len() != m {
            return Err(RegenError::InvalidArgument(format!(
                "row {i} has length {}",
                row.len()
            )));
        }
        if row.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(RegenError::InvalidArgument(format!(
                "row {i} is not a probability vector"
            )));
        }
    }
    Ok(())
}

fn sample_discrete<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl MinorizedKernel for FiniteMinorized {
    type State = usize;

    fn step<R: Rng + ?Sized>(&self, u: &usize, rng: &mut R) -> usize {
        sample_discrete(&self.p[*u], rng)
    }

    fn sample_mu<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_discrete(&self.mu, rng)
    }

    fn small_fn(&self, u: &usize) -> f64 {
        self.h[*u]
    }

    fn ratio(&self, u: &usize, v: &usize) -> f64 {
        let num = self.h[*u] * self.mu[*v];
        if num == 0.0 {
            0.0
        } else {
            num / self.p[*u][*v]
        }
    }
}

/// Two-phase ±1 flip chain viewed through its block chain
/// `U_t = (X_{2t}, X_{2t+1})`. The first kernel flips with probability `a`,
/// the second with probability `b`.
///
/// `K_U((x₀, x₁), (x₀', x₁')) = K₂(x₁, x₀') K₁(x₀', x₁')`, minorized with
/// `h ≡ 2 min(b, 1 − b)` and `μ(x₀', x₁') = K₁(x₀', x₁') / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipBlockKernel {
    a: f64,
    b: f64,
}

impl FlipBlockKernel {
    pub fn new(a: f64, b: f64) -> Result<Self, RegenError> {
        if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
            return Err(RegenError::InvalidArgument(format!(
                "flip probabilities ({a}, {b}) must lie in (0, 1)"
            )));
        }
        Ok(Self { a, b })
    }

    fn flip<R: Rng + ?Sized>(x: f64, p: f64, rng: &mut R) -> f64 {
        if rng.random::<f64>() < p {
            -x
        } else {
            x
        }
    }

    fn kernel_prob(x: f64, y: f64, p: f64) -> f64 {
        if x == y {
            1.0 - p
        } else {
            p
        }
    }

    /// Sum of the observed coordinates `X_{2t+1} + X_{2t+2}` over one block transition.
    pub fn block_sum(u: &(f64, f64), v: &(f64, f64), out: &mut [f64]) {
        out[0] += u.1 + v.0;
    }
}

impl MinorizedKernel for FlipBlockKernel {
    type State = (f64, f64);

    fn step<R: Rng + ?Sized>(&self, u: &(f64, f64), rng: &mut R) -> (f64, f64) {
        let x0 = Self::flip(u.1, self.b, rng);
        let x1 = Self::flip(x0, self.a, rng);
        (x0, x1)
    }

    fn sample_mu<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let x0 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        (x0, Self::flip(x0, self.a, rng))
    }

    fn small_fn(&self, _u: &(f64, f64)) -> f64 {
        2.0 * self.b.min(1.0 - self.b)
    }

    fn ratio(&self, u: &(f64, f64), v: &(f64, f64)) -> f64 {
        self.b.min(1.0 - self.b) / Self::kernel_prob(u.1, v.0, self.b)
    }
}

/// `n` transitions of the split chain: returns `U_0..U_n` and `δ_0..δ_{n−1}`.
pub fn run_split_chain<K: MinorizedKernel, R: Rng + ?Sized>(
    kernel: &K,
    init: K::State,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<K::State>, Vec<bool>), RegenError> {
    if n < 2 {
        return Err(RegenError::InvalidArgument(
            "need n >= 2 transitions".into(),
        ));
    }
    let mut states = Vec::with_capacity(n + 1);
    let mut bells = Vec::with_capacity(n);
    states.push(init);
    for t in 0..n {
        let next = kernel.step(&states[t], rng);
        let r = kernel.ratio(&states[t], &next);
        if !(0.0..=1.0 + RATIO_SLACK).contains(&r) {
            return Err(RegenError::RatioOutOfRange { t, ratio: r });
        }
        bells.push(r > 0.0 && open_uniform(rng) <= r);
        states.push(next);
    }
    Ok((states, bells))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TourRecord {
    /// Regeneration time `T_i` that opens the tour.
    pub start: usize,
    pub tau: usize,
    pub y: Vec<f64>,
    /// `Y_i − kθτ_i`, present when `θ` was supplied.
    pub y_centered: Option<Vec<f64>>,
}

/// Complete tours between consecutive regeneration times.
///
/// Regeneration times are the `t` with `δ_{t−1} = 1`. Tour `i` covers block
/// transitions `U_t → U_{t+1}` for `t ∈ [T_i, T_{i+1})`; `contrib(u, v, out)`
/// adds the `k` observations `f(g_j(u, v))` of one transition to `out`.
/// The segment before the first and after the last regeneration is dropped.
pub fn tours<S, F>(
    states: &[S],
    bells: &[bool],
    d: usize,
    k: usize,
    theta: Option<&[f64]>,
    contrib: F,
) -> Result<Vec<TourRecord>, RegenError>
where
    F: Fn(&S, &S, &mut [f64]),
{
    if states.len() != bells.len() + 1 {
        return Err(RegenError::InvalidArgument(format!(
            "{} states for {} bells",
            states.len(),
            bells.len()
        )));
    }
    if let Some(th) = theta {
        if th.len() != d {
            return Err(RegenError::InvalidArgument(
                "theta dimension mismatch".into(),
            ));
        }
    }
    let regen: Vec<usize> = bells
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(t, _)| t + 1)
        .collect();
    if regen.is_empty() {
        return Err(RegenError::NoRegeneration);
    }
    let mut out = Vec::with_capacity(regen.len().saturating_sub(1));
    for w in regen.windows(2) {
        let (start, end) = (w[0], w[1]);
        let mut y = vec![0.0; d];
        for t in start..end {
            contrib(&states[t], &states[t + 1], &mut y);
        }
        let tau = end - start;
        let y_centered = theta.map(|th| {
            y.iter()
                .zip(th)
                .map(|(yi, ti)| yi - (k * tau) as f64 * ti)
                .collect()
        });
        out.push(TourRecord {
            start,
            tau,
            y,
            y_centered,
        });
    }
    Ok(out)
}

/// Emits `i,T_i,tau_i,Y_1..Y_d`, with `i` counting from 1.
pub fn write_tours_csv<W: Write>(records: &[TourRecord], w: W) -> Result<(), RegenError> {
    let d = records.first().map_or(0, |r| r.y.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["i".to_string(), "T_i".into(), "tau_i".into()];
    header.extend((1..=d).map(|j| format!("Y_{j}")));
    let io = |e: csv::Error| RegenError::Io(e.to_string());
    wtr.write_record(&header).map_err(io)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), r.start.to_string(), r.tau.to_string()];
        row.extend(r.y.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(io)?;
    }
    wtr.flush().map_err(|e| RegenError::Io(e.to_string()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lag-`l` sample autocorrelation.
pub fn lag_correlation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return f64::NAN;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    let cl: f64 = (0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m)).sum();
    cl / c0
}

/// Standard error of the mean of a 1-dependent sequence, `√((γ₀ + 2γ₁)/m)`.
fn one_dependent_se(xs: &[f64]) -> f64 {
    let m = xs.len();
    let mu = mean(xs);
    let g0 = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
    let g1 = (0..m - 1)
        .map(|i| (xs[i] - mu) * (xs[i + 1] - mu))
        .sum::<f64>()
        / m as f64;
    ((g0 + 2.0 * g1).max(g0 * 1e-12) / m as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TourIdentityReport {
    pub tours: usize,
    pub mean_tau: f64,
    /// Per component: `mean(Y) / (k · mean(τ))`.
    pub ratio: Vec<f64>,
    pub theta: Vec<f64>,
    /// Standard error of `ratio`.
    pub se: Vec<f64>,
    /// `(ratio − θ) / se`.
    pub z: Vec<f64>,
    /// Lag-2 correlation of `Ỹ`, per component.
    pub lag2_corr: Vec<f64>,
    /// Lag-1 autocorrelation of `τ`.
    pub tau_lag1_corr: f64,
    pub flagged: bool,
}

pub fn tour_identity_check(
    records: &[TourRecord],
    k: usize,
    theta: &[f64],
) -> Result<TourIdentityReport, RegenError> {
    if records.len() < MIN_TOURS {
        return Err(RegenError::InsufficientTours {
            have: records.len(),
            needed: MIN_TOURS,
        });
    }
    let d = theta.len();
    if records.iter().any(|r| r.y.len() != d) {
        return Err(RegenError::InvalidArgument(
            "theta dimension mismatch".into(),
        ));
    }
    let taus: Vec<f64> = records.iter().map(|r| r.tau as f64).collect();
    let mean_tau = mean(&taus);
    let mut ratio = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    let mut z = Vec::with_capacity(d);
    let mut lag2_corr = Vec::with_capacity(d);
    for (c, &th) in theta.iter().enumerate().take(d) {
        let ys: Vec<f64> = records.iter().map(|r| r.y[c]).collect();
        let centered: Vec<f64> = records
            .iter()
            .map(|r| r.y[c] - (k * r.tau) as f64 * th)
            .collect();
        let scale = k as f64 * mean_tau;
        let rc = mean(&ys) / scale;
        let sc = one_dependent_se(&centered) / scale;
        ratio.push(rc);
        se.push(sc);
        z.push(if sc > 0.0 {
            (rc - theta[c]) / sc
        } else if rc == theta[c] {
            0.0
        } else {
            f64::INFINITY
        });
        lag2_corr.push(lag_correlation(&centered, 2));
    }
    let flagged = z.iter().any(|v| v.abs() > 4.0);
    Ok(TourIdentityReport {
        tours: records.len(),
        mean_tau,
        ratio,
        theta: theta.to_vec(),
        se,
        z,
        lag2_corr,
        tau_lag1_corr: lag_correlation(&taus, 1),
        flagged,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct KacReport {
    pub mean_tau: f64,
    pub se: f64,
    pub pi_h: f64,
    /// `1 / π(h)`.
    pub expected: f64,
    pub z: f64,
}

/// Compares the mean tour length with `1/π(h)`; `pi_h` is either exact or the
/// long-run average of `h(U_t)`.
pub fn kac_check(records: &[TourRecord], pi_h: f64) -> Result<KacReport, RegenError> {
    if records.len() < 2 {
        return Err(RegenError::InsufficientTours {
            have: records.len(),
            needed: 2,
        });
    }
    if !(pi_h > 0.0) {
        return Err(RegenError::InvalidArgument("pi(h) must be positive".into()));
    }
    let taus: Vec<f64> = records.iter().map(|r| r.tau as f64).collect();
    let m = mean(&taus);
    let var = taus.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (taus.len() - 1) as f64;
    let se = (var / taus.len() as f64).sqrt();
    let expected = 1.0 / pi_h;
    let z = if se > 0.0 {
        (m - expected) / se
    } else if m == expected {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(KacReport {
        mean_tau: m,
        se,
        pi_h,
        expected,
        z,
    })
}

/// Long-run average of `h` over the visited states `U_0..U_{n−1}`.
pub fn mean_small_fn<K: MinorizedKernel>(kernel: &K, states: &[K::State]) -> f64 {
    let n = states.len().saturating_sub(1).max(1);
    states
        .iter()
        .take(n)
        .map(|u| kernel.small_fn(u))
        .sum::<f64>()
        / n as f64
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut dmax) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        dmax = dmax.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    dmax
}

/// Asymptotic 1% critical value of the two-sample KS statistic.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
