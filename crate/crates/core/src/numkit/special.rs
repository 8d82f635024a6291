//! Gamma-family special functions and the quantiles used by confidence regions.

use super::NumError;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn gamma(x: f64) -> f64 {
    ln_gamma(x).exp()
}

const CF_TINY: f64 = 1e-300;

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x)
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / CF_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < CF_TINY {
                d = CF_TINY;
            }
            c = b + an / c;
            if c.abs() < CF_TINY {
                c = CF_TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (h.ln() + log_prefix).exp();
        (1.0 - q).max(0.0)
    }
}

const BETA_CF_TOL: f64 = 1e-12;
const BETA_CF_MAX_ITER: usize = 300;

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_CF_TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let log_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (log_front.exp() * beta_cf(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - log_front.exp() * beta_cf(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

fn check_prob(p: f64) -> Result<(), NumError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(NumError::Domain(format!("probability {p} outside (0, 1)")))
    }
}

/// Bisection for an increasing cdf on `[lo, hi]`, expanding `hi` as needed.
fn invert_increasing(cdf: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn chisq_cdf(x: f64, dof: f64) -> f64 {
    reg_lower_gamma(0.5 * dof, 0.5 * x)
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chisq_quantile(p: f64, dof: usize) -> Result<f64, NumError> {
    check_prob(p)?;
    if dof == 0 {
        return Err(NumError::Domain("chi-square needs dof >= 1".into()));
    }
    let k = dof as f64;
    Ok(invert_increasing(|x| chisq_cdf(x, k), p, 0.0, k.max(1.0)))
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    reg_inc_beta(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2))
}

/// F quantile, found by bisection on the incomplete beta in the beta scale.
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64, NumError> {
    check_prob(p)?;
    if d1 <= 0.0 || d2 <= 0.0 {
        return Err(NumError::Domain(format!(
            "F needs positive dof, got ({d1}, {d2})"
        )));
    }
    let (a, b) = (0.5 * d1, 0.5 * d2);
    let z = invert_increasing(|z| reg_inc_beta(a, b, z), p, 0.0, 1.0);
    Ok(d2 * z / (d1 * (1.0 - z)))
}

/// Quantile of Hotelling's T² with dimension `d` and `df` degrees of freedom,
/// `df·d/(df−d+1) · F(p; d, df−d+1)`.
///
/// `df <= d` means too few batches for the region; the caller must grow the chain.
pub fn hotelling_t2_quantile(p: f64, d: usize, df: usize) -> Result<f64, NumError> {
    check_prob(p)?;
    if d == 0 {
        return Err(NumError::Domain("dimension must be >= 1".into()));
    }
    if df <= d {
        return Err(NumError::DegenerateDof { d, df });
    }
    let (d, df) = (d as f64, df as f64);
    let d2 = df - d + 1.0;
    Ok(df * d / d2 * f_quantile(p, d, d2)?)
}

/// `2π^{d/2} / (d Γ(d/2))`, the volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = 0.5 * d as f64;
    2.0 * std::f64::consts::PI.powf(h) / (d as f64 * gamma(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!(rel(gamma(5.0), 24.0) < 1e-13);
        assert!(rel(gamma(0.5), std::f64::consts::PI.sqrt()) < 1e-13);
        assert!(rel(ln_gamma(100.0), 359.134_205_369_575_4) < 1e-13);
    }

    #[test]
    fn chisq_two_dof_is_exponential() {
        assert!((chisq_quantile(0.90, 2).unwrap() - 4.605_170_186).abs() < 1e-8);
        assert!((chisq_quantile(0.50, 2).unwrap() - 1.386_294_361).abs() < 1e-8);
        assert!((chisq_quantile(0.90, 2).unwrap() + 2.0 * 0.1f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn chisq_one_dof() {
        // 1.6448536269514722² (standard normal 0.95 quantile)
        assert!((chisq_quantile(0.90, 1).unwrap() - 2.705_543_454).abs() < 1e-8);
    }

    #[test]
    fn chisq_domain_errors() {
        assert!(chisq_quantile(0.0, 2).is_err());
        assert!(chisq_quantile(1.0, 2).is_err());
        assert!(chisq_quantile(-0.3, 2).is_err());
        assert!(chisq_quantile(0.5, 0).is_err());
    }

    #[test]
    fn chisq_quantile_inverts_cdf() {
        for &d in &[1usize, 2, 3, 5, 30] {
            for &p in &[0.01, 0.1, 0.5, 0.9, 0.99] {
                let x = chisq_quantile(p, d).unwrap();
                assert!((chisq_cdf(x, d as f64) - p).abs() < 1e-10, "d={d} p={p}");
            }
        }
    }

    #[test]
    fn f_quantile_inverts_cdf() {
        for &(d1, d2) in &[(1.0, 10.0), (2.0, 5.0), (3.0, 150.0), (5.0, 1000.0)] {
            for &p in &[0.01, 0.1, 0.5, 0.9, 0.99] {
                let x = f_quantile(p, d1, d2).unwrap();
                assert!((f_cdf(x, d1, d2) - p).abs() < 1e-8, "({d1},{d2}) p={p}");
            }
        }
    }

    #[test]
    fn hotelling_examples() {
        assert!((hotelling_t2_quantile(0.90, 1, 10).unwrap() - 3.285_012).abs() < 1e-5);
        let big = hotelling_t2_quantile(0.90, 2, 10_000_000).unwrap();
        assert!((big - 4.605_17).abs() < 1e-4);
        assert_eq!(
            hotelling_t2_quantile(0.90, 3, 3),
            Err(NumError::DegenerateDof { d: 3, df: 3 })
        );
    }

    #[test]
    fn hotelling_decreases_to_chisq_limit() {
        for &d in &[1usize, 2, 3] {
            let chi = chisq_quantile(0.9, d).unwrap();
            let mut prev = f64::INFINITY;
            for &df in &[d + 1, d + 3, 20, 100, 1000, 100_000] {
                let t2 = hotelling_t2_quantile(0.9, d, df).unwrap();
                assert!(t2 < prev, "not decreasing at d={d} df={df}");
                assert!(t2 > chi, "below chi-square at d={d} df={df}");
                prev = t2;
            }
            let lim = hotelling_t2_quantile(0.9, d, 10_000_000).unwrap();
            assert!(rel(lim, chi) < 1e-4);
        }
    }

    #[test]
    fn unit_ball_volumes() {
        assert!(rel(unit_ball_volume(1), 2.0) < 1e-14);
        assert!(rel(unit_ball_volume(2), std::f64::consts::PI) < 1e-14);
        assert!(rel(unit_ball_volume(3), 4.0 / 3.0 * std::f64::consts::PI) < 1e-13);
    }
}
