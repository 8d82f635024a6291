"""Smoke test for the cyclic_mcmc extension module.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
target/release/libcyclic_mcmc_py.so to cyclic_mcmc.so on PYTHONPATH.
"""

import math

import cyclic_mcmc as cm


def main():
    s = cm.run_sampler("flip", 200_000, seed=1)
    assert (s.n, s.d, s.k) == (200_000, 1, 2)
    assert s.phase_counts() == [100_000, 100_000]

    rep = cm.estimate(s)
    sigma = rep["sigma_bm"][0][0]
    assert abs(sigma - 1.5) < 0.15, sigma
    assert rep["a_n"] * rep["b_n"] <= s.n

    r = cm.region(s, alpha=0.1)
    assert r.contains([0.0])
    assert r.volume() > 0

    rows = [[math.sin(i), math.cos(0.3 * i)] for i in range(2000)]
    m = cm.SampleMatrix(rows, k=2)
    assert len(m) == 2000 and m.d == 2
    cov = cm.batch_means(m)
    assert len(cov) == 2 and abs(cov[0][1] - cov[1][0]) < 1e-12

    assert abs(cm.chisq_quantile(0.9, 2) + 2 * math.log(0.1)) < 1e-8
    assert abs(cm.hotelling_t2_quantile(0.9, 1, 10) - 3.285012) < 1e-4
    assert abs(cm.ess_threshold(0.1, 2, 0.05) - 5786.8) < 0.5

    stop = cm.run_until_stopped("flip", 0.1, seed=2)
    assert stop["stopped"] and stop["n_eps"] >= 1000

    out = cm.run_experiment(
        """
        mode = "fixed"
        n = 5000
        replications = 4
        seed = 3
        truth = { kind = "exact" }
        [sampler]
        kind = "curve"
        k1 = 3
        """
    )
    assert len(out["rows"]) == 4
    assert 0.0 <= out["aggregate"]["mean"][out["aggregate"]["columns"].index("covered")] <= 1.0

    demo = cm.regen_demo("three_state", 200_000, 4)
    assert abs(demo["kac"]["expected"] - 1 / 0.7) < 1e-9

    try:
        cm.run_sampler("nope", 10)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
