//! Independent reference computations shared by the integration tests.
//! The oracles do not call into the library's numerical routines.

#![allow(dead_code, clippy::needless_range_loop)]

use cyclic_mcmc::numkit::{stream, Matrix};
use cyclic_mcmc::samplers::{LmmModel, LmmSampler};
use rand::Rng;

/// Inverse of a dense square matrix by Gauss–Jordan elimination with
/// partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|r| r.iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

/// Posterior of `(β, γ)` given precisions, from the joint precision
/// `Q = λ_e WᵀW + diag(Σ_β⁻¹, λ_γ I)` with `W = [X Z]`:
/// mean `Q⁻¹(λ_e Wᵀy + [Σ_β⁻¹μ_β; 0])`, covariance `Q⁻¹`.
pub fn joint_precision_posterior(
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    y: &[f64],
    mu_beta: &[f64],
    sigma_beta: &[Vec<f64>],
    lambda_gamma: f64,
    lambda_e: f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = mu_beta.len();
    let g = z[0].len();
    let w: Vec<Vec<f64>> = x
        .iter()
        .zip(z)
        .map(|(xr, zr)| xr.iter().chain(zr).copied().collect())
        .collect();
    let m = p + g;
    let sb_inv = gauss_jordan_inverse(sigma_beta);
    let mut q = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            q[i][j] = lambda_e * w.iter().map(|r| r[i] * r[j]).sum::<f64>();
        }
    }
    for i in 0..p {
        for j in 0..p {
            q[i][j] += sb_inv[i][j];
        }
    }
    for i in p..m {
        q[i][i] += lambda_gamma;
    }
    let prior = mat_vec(&sb_inv, mu_beta);
    let rhs: Vec<f64> = (0..m)
        .map(|i| {
            lambda_e * w.iter().zip(y).map(|(r, yv)| r[i] * yv).sum::<f64>()
                + if i < p { prior[i] } else { 0.0 }
        })
        .collect();
    let cov = gauss_jordan_inverse(&q);
    (mat_vec(&cov, &rhs), cov)
}

/// Stationary distribution of a stochastic matrix: solves `πP = π`,
/// `Σπ = 1` by replacing one balance equation with the normalization.
pub fn stationary_by_solve(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut a = vec![vec![0.0; n]; n];
    for v in 0..n {
        for u in 0..n {
            a[v][u] = p[u][v] - if u == v { 1.0 } else { 0.0 };
        }
    }
    a[n - 1] = vec![1.0; n];
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    mat_vec(&gauss_jordan_inverse(&a), &b)
}

/// `h(x) = 2x + 1 − eˣ`.
pub fn curve_h(x: f64) -> f64 {
    2.0 * x + 1.0 - x.exp()
}

/// Positive root of `h` by Newton's method from the right.
pub fn curve_upper_root() -> f64 {
    let mut x: f64 = 2.0;
    for _ in 0..100 {
        let step = curve_h(x) / (2.0 - x.exp());
        x -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    x
}

/// Composite 5-point Gauss–Legendre rule.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let mid = a + (i as f64 + 0.5) * h;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * total
}

/// `E[x1 x2]` for the uniform distribution under `h` on `[0, root]`.
pub fn curve_theta() -> f64 {
    let b = curve_upper_root();
    let num = gauss_legendre(|x| x * curve_h(x).powi(2) / 2.0, 0.0, b, 2000);
    let den = gauss_legendre(curve_h, 0.0, b, 2000);
    num / den
}

/// Closed-form asymptotic variance of the two-phase flip chain with flip
/// probabilities `a`, `b` and `f = x`: `1 + (u + v + 2uv)/(1 − uv)`.
pub fn flip_sigma(a: f64, b: f64) -> f64 {
    let (u, v) = (1.0 - 2.0 * a, 1.0 - 2.0 * b);
    1.0 + (u + v + 2.0 * u * v) / (1.0 - u * v)
}

/// Random random-intercept model with `p ≤ 3`, `g ≤ 5`, `n ≤ 20`, a random
/// SPD prior covariance and random precisions.
pub fn random_lmm(seed: u64) -> (LmmModel, f64, f64) {
    let mut rng = stream(seed, 7);
    let p = rng.random_range(1..=3);
    let g = rng.random_range(1..=5);
    let n = rng.random_range((p + 1).max(g)..=20);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..p)
                .map(|j| {
                    if j == 0 {
                        1.0
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect()
        })
        .collect();
    let mut z = vec![vec![0.0; g]; n];
    for (i, row) in z.iter_mut().enumerate() {
        row[if i < g { i } else { rng.random_range(0..g) }] = 1.0;
    }
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mu_beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| {
                    if j <= i {
                        rng.random_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let sigma_beta: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| {
                    (0..p).map(|k| l[i][k] * l[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let model = LmmModel {
        y,
        x: Matrix::from_rows(&x).unwrap(),
        z: Matrix::from_rows(&z).unwrap(),
        mu_beta,
        sigma_beta: Matrix::from_rows(&sigma_beta).unwrap(),
        a_gamma: 1.0,
        b_gamma: 1.0,
        a_e: 1.0,
        b_e: 1.0,
        k1: 1,
    };
    let lambda_gamma = rng.random_range(0.05..5.0);
    let lambda_e = rng.random_range(0.05..5.0);
    (model, lambda_gamma, lambda_e)
}

/// Largest relative discrepancy (scaled by the oracle's largest entry) of the
/// blockwise conditional mean and covariance against the joint-precision oracle.
pub fn lmm_conditional_discrepancy(
    model: &LmmModel,
    lambda_gamma: f64,
    lambda_e: f64,
) -> (f64, f64) {
    let sampler = LmmSampler::new(model.clone()).unwrap();
    let (mean, cov) = sampler
        .beta_gamma_conditional(lambda_gamma, lambda_e)
        .unwrap();
    let (o_mean, o_cov) = joint_precision_posterior(
        &model.x.to_rows(),
        &model.z.to_rows(),
        &model.y,
        &model.mu_beta,
        &model.sigma_beta.to_rows(),
        lambda_gamma,
        lambda_e,
    );
    let scale_m = o_mean
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    let err_m = mean
        .iter()
        .zip(&o_mean)
        .fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
    let m = cov.matrix();
    let scale_c = o_cov.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut err_c = 0.0f64;
    for (i, row) in o_cov.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            err_c = err_c.max((m[(i, j)] - v).abs());
        }
    }
    (err_m / scale_m, err_c / scale_c)
}
