use cyclic_mcmc::chain::{run_chain, ChainRunner, SampleMatrix};
use cyclic_mcmc::estimators::{batch_means_cov, confidence_region, BatchPlan, EstimatorReport};
use cyclic_mcmc::numkit::{
    cholesky, f_cdf, f_quantile, hotelling_t2_quantile, std_normal, stream, Matrix, SpdMatrix,
};
use cyclic_mcmc::samplers::{CurveRegion, CurveSampler, FlipChain};
use cyclic_mcmc::stopping::{stop_time_on, StopConfig};
use proptest::prelude::*;

fn spd_from(entries: &[f64], d: usize) -> Matrix {
    let b = Matrix::from_vec(d, d, entries[..d * d].to_vec()).unwrap();
    let mut m = b.matmul(&b.transpose());
    for i in 0..d {
        m = m.add(&Matrix::from_diag(&{
            let mut e = vec![0.0; d];
            e[i] = 0.5;
            e
        }));
    }
    m
}

fn gaussian_ar(n: usize, d: usize, phi: f64, seed: u64) -> SampleMatrix {
    let mut rng = stream(seed, 0);
    let mut x = vec![0.0; d];
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = phi * *v + std_normal(&mut rng);
        }
        rows.push(x.clone());
    }
    SampleMatrix::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs(d in 1usize..6, entries in prop::collection::vec(-2.0f64..2.0, 36)) {
        let m = spd_from(&entries, d);
        let l = cholesky(&m).unwrap();
        let back = l.matmul(&l.transpose());
        prop_assert!(back.sub(&m).max_abs() <= 1e-10 * m.max_abs().max(1.0));
        let spd = SpdMatrix::new(m.clone()).unwrap();
        let inv = spd.inverse_matrix();
        prop_assert!(inv.matmul(&m).sub(&Matrix::identity(d)).max_abs() < 1e-8);
    }

    #[test]
    fn f_quantile_inverts_cdf(p in 0.01f64..0.99, d1 in 1.0f64..20.0, d2 in 1.0f64..200.0) {
        let q = f_quantile(p, d1, d2).unwrap();
        prop_assert!((f_cdf(q, d1, d2) - p).abs() < 1e-9);
    }

    #[test]
    fn t2_quantile_monotone(p in 0.05f64..0.9, d in 1usize..5, extra in 1usize..100) {
        let df = d + extra;
        let a = hotelling_t2_quantile(p, d, df).unwrap();
        let b = hotelling_t2_quantile(p + 0.05, d, df).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn batch_means_affine_equivariant(
        seed in 0u64..1000,
        entries in prop::collection::vec(-2.0f64..2.0, 4),
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let s = gaussian_ar(3_000, 2, 0.4, seed);
        let a = Matrix::from_vec(2, 2, entries.clone()).unwrap();
        prop_assume!((entries[0] * entries[3] - entries[1] * entries[2]).abs() > 0.1);
        let rows: Vec<Vec<f64>> = s
            .rows()
            .map(|r| a.matvec(r).iter().zip(&shift).map(|(u, v)| u + v).collect())
            .collect();
        let t = SampleMatrix::from_rows(&rows).unwrap();
        let plan = BatchPlan::new(s.n(), 0.51).unwrap();
        let bs = batch_means_cov(&s, &plan).unwrap();
        let bt = batch_means_cov(&t, &plan).unwrap();
        let expect = a.matmul(bs.matrix()).matmul(&a.transpose());
        prop_assert!(bt.matrix().sub(&expect).max_abs() <= 1e-9 * expect.max_abs().max(1e-12));
    }

    #[test]
    fn ess_invariant_under_unimodular_maps(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // [[1, a], [b, 1 + ab]] has determinant 1
        let s = gaussian_ar(3_000, 2, 0.3, seed);
        let m = Matrix::from_rows(&[[1.0, a], [b, 1.0 + a * b]]).unwrap();
        let t = s.map_linear(&m).unwrap();
        let e1 = EstimatorReport::compute(&s, 0.51).unwrap().ess.unwrap();
        let e2 = EstimatorReport::compute(&t, 0.51).unwrap().ess.unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-6 * e1);
    }

    #[test]
    fn region_membership_affine_invariant(
        seed in 0u64..1000,
        entries in prop::collection::vec(-2.0f64..2.0, 4),
        probe in prop::collection::vec(-0.2f64..0.2, 2),
    ) {
        prop_assume!((entries[0] * entries[3] - entries[1] * entries[2]).abs() > 0.1);
        let s = gaussian_ar(2_000, 2, 0.2, seed);
        let a = Matrix::from_vec(2, 2, entries).unwrap();
        let t = s.map_linear(&a).unwrap();
        let plan = BatchPlan::new(s.n(), 0.51).unwrap();
        let rs = confidence_region(&s, &plan, 0.1).unwrap();
        let rt = confidence_region(&t, &plan, 0.1).unwrap();
        let x: Vec<f64> = rs.center.iter().zip(&probe).map(|(c, p)| c + p).collect();
        let diff: Vec<f64> = probe.iter().map(|p| -p).collect();
        let margin = (rs.shape.inv_quad_form(&diff) - rs.radius2).abs() / rs.radius2;
        prop_assume!(margin > 1e-6);
        prop_assert_eq!(rs.contains(&x), rt.contains(&a.matvec(&x)));
    }

    #[test]
    fn sample_matrix_io_round_trip(
        d in 1usize..4,
        k in 1usize..5,
        offset_seed in 0usize..100,
        values in prop::collection::vec(-1e6f64..1e6, 0..60),
    ) {
        let n = values.len() / d;
        let offset = offset_seed % k + 1;
        let rows: Vec<Vec<f64>> = (0..n).map(|t| values[t * d..(t + 1) * d].to_vec()).collect();
        let mut s = SampleMatrix::new(d, k, offset).unwrap();
        for r in &rows {
            s.push_row(r).unwrap();
        }
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        if n > 0 {
            prop_assert_eq!(&SampleMatrix::read_csv(csv.as_slice(), k).unwrap(), &s);
        }
        let mut bin = Vec::new();
        s.write_binary(&mut bin).unwrap();
        prop_assert_eq!(&SampleMatrix::read_binary(bin.as_slice()).unwrap(), &s);
    }

    #[test]
    fn segmented_runs_equal_one_run(seed in 0u64..10_000, k1 in 1usize..4, cut in 1usize..300) {
        let sampler = CurveSampler::new(CurveRegion::exp_curve(k1).unwrap());
        let whole = run_chain(&sampler, sampler.initial_state(), 300, 0, &mut stream(seed, 0)).unwrap();
        let mut runner = ChainRunner::new(&sampler, sampler.initial_state(), stream(seed, 0));
        let mut parts = runner.empty_samples();
        runner.extend(&mut parts, cut).unwrap();
        runner.extend(&mut parts, 300 - cut).unwrap();
        prop_assert_eq!(parts, whole);
    }

    #[test]
    fn phase_labels_cycle(n in 1usize..50, burn in 0usize..20) {
        let flip = FlipChain::new(0.3, 0.6).unwrap();
        let s = run_chain(&flip, 1.0, n, burn, &mut stream(0, 0)).unwrap();
        for t in 0..s.n() {
            prop_assert_eq!(s.phase_of(t), (burn + t) % 2 + 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn smaller_epsilon_never_stops_earlier(seed in 0u64..1000, e1 in 0.05f64..0.4, ratio in 1.0f64..3.0) {
        let flip = FlipChain::new(0.25, 0.5).unwrap();
        let s = run_chain(&flip, 1.0, 60_000, 0, &mut stream(seed, 0)).unwrap();
        let base = StopConfig { n_start: Some(200), n0: 200, ..StopConfig::new(0.1, e1) };
        let larger = StopConfig { epsilon: e1 * ratio, ..base.clone() };
        let n_small = stop_time_on(&s, &base).unwrap().unwrap_or(usize::MAX);
        let n_large = stop_time_on(&s, &larger).unwrap().unwrap_or(usize::MAX);
        prop_assert!(n_small >= n_large);
    }
}
