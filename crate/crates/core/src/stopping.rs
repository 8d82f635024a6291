//! Fixed-volume sequential stopping: stop at the first check point `n` with
//! `V(n)^{1/d} + s(n, ε) ≤ ε 𝔐̂_n`, where `s(n, ε) = ε 𝔐̂_n 𝕀(n < n₀) + 1/n`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, ChainRunner, CyclicSampler, SampleMatrix};
use crate::estimators::{
    batch_means_cov, ess, region_from_parts, region_volume, sample_mean_cov, tess, BatchPlan,
    ConfidenceRegion, EstimatorError, DEFAULT_KAPPA,
};
use crate::numkit::{chisq_quantile, unit_ball_volume, Matrix};

pub const DEFAULT_N0: usize = 1000;
pub const DEFAULT_GROWTH: f64 = 1.2;
const MIN_FIRST_CHECK: usize = 1000;

#[derive(Debug, Error)]
pub enum StopError {
    #[error("invalid stopping config: {0}")]
    InvalidConfig(String),
    #[error("rule did not trigger before the cap of {max_n} iterations")]
    BudgetExceeded {
        max_n: usize,
        partial: Box<StopReport>,
    },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Relative-magnitude factor `𝔐̂_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `𝔐 = 1`: absolute precision.
    Unit,
    /// `𝔐̂ = |Ψ̂|^{1/(2d)}`: precision relative to the posterior spread.
    DetPsi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    pub alpha: f64,
    pub epsilon: f64,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    #[serde(default = "default_growth")]
    pub check_growth: f64,
    /// First check point; `max(n0, 1000)` when unset.
    #[serde(default)]
    pub n_start: Option<usize>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Optional iteration cap.
    #[serde(default)]
    pub max_n: Option<usize>,
}

fn default_n0() -> usize {
    DEFAULT_N0
}
fn default_scaling() -> Scaling {
    Scaling::DetPsi
}
fn default_growth() -> f64 {
    DEFAULT_GROWTH
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

impl StopConfig {
    pub fn new(alpha: f64, epsilon: f64) -> Self {
        Self {
            alpha,
            epsilon,
            n0: DEFAULT_N0,
            scaling: Scaling::DetPsi,
            check_growth: DEFAULT_GROWTH,
            n_start: None,
            kappa: DEFAULT_KAPPA,
            max_n: None,
        }
    }

    pub fn validate(&self) -> Result<(), StopError> {
        let bad = |m: String| Err(StopError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} must lie in (0, 1)", self.alpha));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon = {} must be positive", self.epsilon));
        }
        if self.n0 == 0 {
            return bad("n0 must be >= 1".into());
        }
        if !(self.check_growth > 1.0 && self.check_growth.is_finite()) {
            return bad(format!(
                "check_growth = {} must exceed 1",
                self.check_growth
            ));
        }
        if self.n_start == Some(0) {
            return bad("n_start must be >= 1".into());
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad(format!("kappa = {} must lie in (0, 1)", self.kappa));
        }
        Ok(())
    }

    pub fn first_check(&self) -> usize {
        self.n_start.unwrap_or(self.n0.max(MIN_FIRST_CHECK))
    }

    /// Check point following `n`: `⌈n · growth⌉`, at least `n + 1`.
    pub fn next_check(&self, n: usize) -> usize {
        // the slack keeps products like 1000·1.2 from rounding up past 1200
        let next = (n as f64 * self.check_growth - 1e-9).ceil() as usize;
        next.max(n + 1)
    }

    /// Unbounded check schedule.
    pub fn schedule(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(self.first_check()), move |&n| Some(self.next_check(n)))
    }
}

/// Both sides of the rule at one check point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub n: usize,
    pub holds: bool,
    /// `V^{1/d} + s(n, ε)`; infinite when the region is unavailable.
    pub lhs: f64,
    /// `ε 𝔐̂_n`.
    pub rhs: f64,
    pub volume: Option<f64>,
    pub ess: Option<f64>,
    pub tess: Option<f64>,
    /// Why the rule could not be evaluated.
    pub reason: Option<String>,
}

struct Evaluation {
    check: RuleCheck,
    region: Option<ConfidenceRegion>,
    sigma: Option<Matrix>,
}

fn evaluate(s: &SampleMatrix, cfg: &StopConfig) -> Evaluation {
    let n = s.n();
    let d = s.d();
    let fail = |rhs: f64, reason: String| Evaluation {
        check: RuleCheck {
            n,
            holds: false,
            lhs: f64::INFINITY,
            rhs,
            volume: None,
            ess: None,
            tess: None,
            reason: Some(reason),
        },
        region: None,
        sigma: None,
    };
    let psi = match sample_mean_cov(s) {
        Ok((_, psi)) => psi,
        Err(e) => return fail(f64::NAN, e.to_string()),
    };
    let scale = match cfg.scaling {
        Scaling::Unit => Some(1.0),
        Scaling::DetPsi => psi
            .spd()
            .ok()
            .map(|p| (p.log_det() / (2.0 * d as f64)).exp()),
    };
    let Some(scale) = scale else {
        return fail(f64::NAN, EstimatorError::NonSpd.to_string());
    };
    let rhs = cfg.epsilon * scale;
    let result = (|| {
        let plan = BatchPlan::new(n, cfg.kappa)?;
        let sigma = batch_means_cov(s, &plan)?;
        let spd = sigma.spd()?.clone();
        let region = region_from_parts(s.prefix_mean(plan.used()), spd, &plan, cfg.alpha)?;
        Ok::<_, EstimatorError>((region, sigma.matrix().clone()))
    })();
    let (region, sigma) = match result {
        Ok(r) => r,
        Err(e) => return fail(rhs, e.to_string()),
    };
    let volume = region_volume(&region);
    let pad = if n < cfg.n0 { rhs } else { 0.0 } + 1.0 / n as f64;
    let lhs = volume.powf(1.0 / d as f64) + pad;
    let ess = psi.spd().ok().and_then(|p| ess(n, p, &region.shape).ok());
    let tess = tess(n, psi.matrix(), &sigma).ok();
    Evaluation {
        check: RuleCheck {
            n,
            holds: lhs <= rhs,
            lhs,
            rhs,
            volume: Some(volume),
            ess,
            tess,
            reason: None,
        },
        region: Some(region),
        sigma: Some(sigma),
    }
}

/// Evaluates the rule on all rows of `s`. Degenerate estimates give
/// `holds = false` with a reason rather than an error.
pub fn stop_rule_holds(s: &SampleMatrix, cfg: &StopConfig) -> RuleCheck {
    evaluate(s, cfg).check
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopReport {
    /// `N(ε)`, or the last check point when the cap was hit.
    pub n_eps: usize,
    pub stopped: bool,
    pub estimate: Vec<f64>,
    pub sigma_bm: Option<Matrix>,
    /// `T² / n` of the final region.
    pub radius2: Option<f64>,
    pub volume: Option<f64>,
    pub ess_at_stop: Option<f64>,
    pub tess_at_stop: Option<f64>,
    /// Rows produced by each phase up to `N(ε)`.
    pub phase_counts: Vec<usize>,
    pub checks: Vec<RuleCheck>,
    #[serde(skip)]
    pub region: Option<ConfidenceRegion>,
}

impl StopReport {
    /// Writes `n,lhs,rhs,holds`.
    pub fn write_checks_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["n", "lhs", "rhs", "holds"])?;
        for c in &self.checks {
            wtr.write_record([
                c.n.to_string(),
                c.lhs.to_string(),
                c.rhs.to_string(),
                c.holds.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}

fn build_report(
    s: &SampleMatrix,
    eval: Evaluation,
    stopped: bool,
    checks: Vec<RuleCheck>,
) -> StopReport {
    let estimate = eval
        .region
        .as_ref()
        .map_or_else(|| s.mean(), |r| r.center.clone());
    StopReport {
        n_eps: s.n(),
        stopped,
        estimate,
        sigma_bm: eval.sigma,
        radius2: eval.region.as_ref().map(|r| r.radius2),
        volume: eval.check.volume,
        ess_at_stop: eval.check.ess,
        tess_at_stop: eval.check.tess,
        phase_counts: s.phase_counts(),
        checks,
        region: eval.region,
    }
}

/// Runs the chain from `init`, checking the rule on the schedule of `cfg`.
/// The chain is extended between checks, never restarted.
pub fn run_until_stop<S, R>(
    sampler: &S,
    init: S::State,
    cfg: &StopConfig,
    rng: R,
) -> Result<StopReport, StopError>
where
    S: CyclicSampler,
    R: Rng,
{
    cfg.validate()?;
    let mut runner = ChainRunner::new(sampler, init, rng);
    let mut samples = runner.empty_samples();
    let mut checks = Vec::new();
    let mut target = cfg.first_check();
    loop {
        if let Some(max_n) = cfg.max_n {
            if target > max_n {
                let eval = evaluate(&samples, cfg);
                let partial = build_report(&samples, eval, false, checks);
                return Err(StopError::BudgetExceeded {
                    max_n,
                    partial: Box::new(partial),
                });
            }
        }
        let more = target - samples.n();
        runner.extend(&mut samples, more)?;
        let eval = evaluate(&samples, cfg);
        checks.push(eval.check.clone());
        if eval.check.holds {
            return Ok(build_report(&samples, eval, true, checks));
        }
        target = cfg.next_check(target);
    }
}

/// `N(ε)` for an already-recorded chain: the first schedule point at which
/// the rule holds on the prefix, if any fits in `s`.
pub fn stop_time_on(s: &SampleMatrix, cfg: &StopConfig) -> Result<Option<usize>, StopError> {
    cfg.validate()?;
    for n in cfg.schedule() {
        if n > s.n() {
            return Ok(None);
        }
        if stop_rule_holds(&s.prefix(n), cfg).holds {
            return Ok(Some(n));
        }
    }
    unreachable!("schedule is unbounded")
}

/// Minimum ESS implied by the rule: `(2π^{d/2}/(dΓ(d/2)))^{2/d} χ²_{1−α,d} / ε²`.
pub fn ess_threshold(alpha: f64, d: usize, epsilon: f64) -> Result<f64, StopError> {
    if !(epsilon > 0.0) {
        return Err(StopError::InvalidConfig(format!(
            "epsilon = {epsilon} must be positive"
        )));
    }
    let chi = chisq_quantile(1.0 - alpha, d).map_err(EstimatorError::from)?;
    Ok(unit_ball_volume(d).powf(2.0 / d as f64) * chi / (epsilon * epsilon))
}

/// `lim_{ε→0} ε √N(ε) = a |Σ|^{1/(2d)} / 𝔐` with
/// `a = (2/(dΓ(d/2)))^{1/d} (π χ²_{1−α,d})^{1/2}`.
pub fn asymptotic_eps_sqrt_n(
    alpha: f64,
    sigma: &crate::numkit::SpdMatrix,
    scale: f64,
) -> Result<f64, StopError> {
    let d = sigma.dim();
    let chi = chisq_quantile(1.0 - alpha, d).map_err(EstimatorError::from)?;
    let df = d as f64;
    let a = (2.0 / (df * crate::numkit::gamma(df / 2.0))).powf(1.0 / df)
        * (std::f64::consts::PI * chi).sqrt();
    Ok(a * (sigma.log_det() / (2.0 * df)).exp() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::run_chain;
    use crate::numkit::{std_normal, stream, SpdMatrix};
    use crate::samplers::FlipChain;

    fn iid(n: usize, seed: u64) -> SampleMatrix {
        let mut rng = stream(seed, 0);
        let rows: Vec<[f64; 1]> = (0..n).map(|_| [std_normal(&mut rng)]).collect();
        SampleMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = StopConfig::new(0.1, 0.05);
        let pts: Vec<usize> = cfg.schedule().take(4).collect();
        assert_eq!(pts, vec![1000, 1200, 1440, 1728]);
        let small = StopConfig {
            n_start: Some(3),
            ..cfg.clone()
        };
        assert_eq!(
            small.schedule().take(4).collect::<Vec<_>>(),
            vec![3, 4, 5, 6]
        );
        let big_n0 = StopConfig { n0: 5000, ..cfg };
        assert_eq!(big_n0.first_check(), 5000);
    }

    #[test]
    fn config_validation() {
        assert!(StopConfig::new(0.1, 0.05).validate().is_ok());
        assert!(StopConfig::new(1.0, 0.05).validate().is_err());
        assert!(StopConfig::new(0.1, 0.0).validate().is_err());
        let mut c = StopConfig::new(0.1, 0.05);
        c.check_growth = 1.0;
        assert!(c.validate().is_err());
        c.check_growth = 1.2;
        c.n0 = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_toml_defaults() {
        let c: StopConfig =
            toml::from_str("alpha = 0.1\nepsilon = 0.05\nscaling = \"unit\"").unwrap();
        assert_eq!(c.n0, DEFAULT_N0);
        assert_eq!(c.scaling, Scaling::Unit);
        assert_eq!(c.check_growth, 1.2);
        assert!(toml::from_str::<StopConfig>("alpha = 0.1\nepsilon = 0.05\nbogus = 1").is_err());
    }

    #[test]
    fn below_n0_never_holds() {
        let s = iid(5_000, 1);
        let cfg = StopConfig {
            n0: 10_000,
            ..StopConfig::new(0.1, 1e6)
        };
        let c = stop_rule_holds(&s, &cfg);
        assert!(!c.holds);
        assert!(c.lhs > c.rhs);
        let cfg = StopConfig { n0: 100, ..cfg };
        assert!(stop_rule_holds(&s, &cfg).holds);
    }

    #[test]
    fn degenerate_estimates_do_not_stop() {
        let rows = vec![[1.0]; 50];
        let s = SampleMatrix::from_rows(&rows).unwrap();
        let c = stop_rule_holds(&s, &StopConfig::new(0.1, 1e6));
        assert!(!c.holds);
        assert!(c.reason.is_some());
        let tiny = iid(3, 2);
        assert!(!stop_rule_holds(&tiny, &StopConfig::new(0.1, 1e6)).holds);
    }

    #[test]
    fn one_dimensional_reduction() {
        // d = 1: V = 2 t √(Σ̂/n), so the rule reads 2t√(Σ̂/n) + 1/n ≤ ε√Ψ̂
        let s = iid(40_000, 3);
        let cfg = StopConfig::new(0.1, 0.05);
        let c = stop_rule_holds(&s, &cfg);
        let plan = BatchPlan::new(s.n(), cfg.kappa).unwrap();
        let sig = batch_means_cov(&s, &plan).unwrap().matrix()[(0, 0)];
        let (_, psi) = sample_mean_cov(&s).unwrap();
        let t2 = crate::numkit::hotelling_t2_quantile(0.9, 1, plan.a_n - 1).unwrap();
        let lhs = 2.0 * (t2 * sig / plan.used() as f64).sqrt() + 1.0 / s.n() as f64;
        assert!((c.lhs - lhs).abs() < 1e-12);
        assert!((c.rhs - 0.05 * psi.matrix()[(0, 0)].sqrt()).abs() < 1e-12);
    }

    #[test]
    fn iid_stopping_time_matches_prediction() {
        // n ≈ 4 χ²_{0.9,1} / ε² = 4328.9 for i.i.d. normal draws
        let cfg = StopConfig {
            n_start: Some(500),
            n0: 500,
            check_growth: 1.05,
            ..StopConfig::new(0.1, 0.05)
        };
        let mut rng = stream(4, 0);
        let rows: Vec<[f64; 1]> = (0..20_000).map(|_| [std_normal(&mut rng)]).collect();
        let s = SampleMatrix::from_rows(&rows).unwrap();
        let n = stop_time_on(&s, &cfg).unwrap().unwrap() as f64;
        assert!(n > 4328.9 * 0.6 && n < 4328.9 * 1.6, "{n}");
    }

    #[test]
    fn ess_threshold_examples() {
        assert!((ess_threshold(0.1, 2, 0.05).unwrap() - 5786.8).abs() < 0.5);
        assert!((ess_threshold(0.1, 1, 0.05).unwrap() - 4328.9).abs() < 0.1);
        let a = ess_threshold(0.1, 3, 0.1).unwrap();
        let b = ess_threshold(0.1, 3, 0.05).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(ess_threshold(0.1, 2, 0.0).is_err());
    }

    #[test]
    fn flip_chain_stop_near_predictor() {
        let chain = FlipChain::new(0.25, 0.5).unwrap();
        let cfg = StopConfig::new(0.1, 0.05);
        let rep = run_until_stop(&chain, 1.0, &cfg, stream(5, 0)).unwrap();
        let sigma = SpdMatrix::new(Matrix::from_diag(&[1.5])).unwrap();
        let lim = asymptotic_eps_sqrt_n(0.1, &sigma, 1.0).unwrap();
        let predicted = (lim / 0.05).powi(2);
        let ratio = rep.n_eps as f64 / predicted;
        assert!((0.5..=2.0).contains(&ratio), "{} vs {predicted}", rep.n_eps);
        assert!(rep.stopped);
        let last = rep.checks.last().unwrap();
        assert!(last.holds && rep.checks[..rep.checks.len() - 1].iter().all(|c| !c.holds));
        assert_eq!(rep.phase_counts.iter().sum::<usize>(), rep.n_eps);
        let thr = ess_threshold(0.1, 1, 0.05).unwrap();
        assert!(rep.ess_at_stop.unwrap() >= 0.8 * thr);
    }

    #[test]
    fn deterministic_and_resumes() {
        let chain = FlipChain::new(0.25, 0.5).unwrap();
        let cfg = StopConfig::new(0.1, 0.1);
        let a = run_until_stop(&chain, 1.0, &cfg, stream(6, 0)).unwrap();
        let b = run_until_stop(&chain, 1.0, &cfg, stream(6, 0)).unwrap();
        assert_eq!(a, b);
        // the segmented run equals one uninterrupted run of the same length
        let full = run_chain(&chain, 1.0, a.n_eps, 0, &mut stream(6, 0)).unwrap();
        let plan = BatchPlan::new(a.n_eps, cfg.kappa).unwrap();
        assert_eq!(full.prefix_mean(plan.used()), a.estimate);
        let c = stop_rule_holds(&full, &cfg);
        assert_eq!(Some(&c), a.checks.last());
    }

    #[test]
    fn budget_exceeded_reports_partial() {
        let chain = FlipChain::new(0.25, 0.5).unwrap();
        let cfg = StopConfig {
            max_n: Some(1500),
            ..StopConfig::new(0.1, 1e-4)
        };
        match run_until_stop(&chain, 1.0, &cfg, stream(7, 0)) {
            Err(StopError::BudgetExceeded { max_n, partial }) => {
                assert_eq!(max_n, 1500);
                assert_eq!(partial.n_eps, 1440);
                assert!(!partial.stopped);
                assert_eq!(partial.checks.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checks_csv_and_json() {
        let chain = FlipChain::new(0.25, 0.5).unwrap();
        let rep = run_until_stop(&chain, 1.0, &StopConfig::new(0.1, 0.2), stream(8, 0)).unwrap();
        let mut buf = Vec::new();
        rep.write_checks_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,lhs,rhs,holds\n"));
        assert_eq!(text.lines().count(), rep.checks.len() + 1);
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(v["n_eps"].as_u64().unwrap() as usize, rep.n_eps);
    }
}
