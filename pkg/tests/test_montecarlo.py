import math

import numpy as np
import pytest
from scipy.stats import norm, qmc

from hypoldp.fixtures import load_fixture
from hypoldp.montecarlo import (DensityError, SimConfig, conditioned_paths, config_hash,
                                counterexample_exact, estimate_density, ldp_verify,
                                simulate_endpoints, skeleton_on_dyadic)
from hypoldp.ratefn import EndpointConstraint, RateOptions, minimize_energy
from hypoldp.skeleton import CMPath, endpoint


def test_counterexample_closed_form():
    v0 = counterexample_exact(1.0, 0.0)
    assert v0.p == pytest.approx(math.sqrt(3) / math.pi, rel=1e-14)
    assert v0.p_printed == v0.p
    v1 = counterexample_exact(1.0, 1.0)
    assert v1.p == pytest.approx(math.sqrt(3) / math.pi * math.exp(-6), rel=1e-14)
    assert v1.p_printed == pytest.approx(math.sqrt(3) / math.pi * math.exp(-1 / 6), rel=1e-14)
    # the closed form is the Gaussian density with the stated covariance
    cov = v1.covariance
    x = np.array([0.0, 1.0])
    dens = math.exp(-0.5 * x @ np.linalg.solve(cov, x)) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
    assert v1.p == pytest.approx(dens, rel=1e-12)
    with pytest.raises(ValueError):
        counterexample_exact(0.0, 1.0)


def test_seed_determinism_across_workers():
    sys = load_fixture("heisenberg")
    kw = dict(eps=0.7, k=6, n_paths=5000, seed=11, block_size=1024)
    a = simulate_endpoints(sys, np.zeros(3), workers=1, **kw)
    b = simulate_endpoints(sys, np.zeros(3), workers=3, **kw)
    np.testing.assert_array_equal(a.endpoints, b.endpoints)
    c = simulate_endpoints(sys, np.zeros(3), workers=1, **{**kw, "seed": 12})
    assert not np.array_equal(a.endpoints, c.endpoints)


def test_paths_match_skeleton_of_the_driver():
    sys = load_fixture("engel")
    batch = simulate_endpoints(sys, np.zeros(3), 0.5, 5, 3, seed=2, store_paths=True)
    for path, noise in zip(batch.paths, batch.noise):
        h = CMPath.from_values(np.linspace(0, 1, 33), 0.5 * noise)
        np.testing.assert_allclose(path[-1], endpoint(sys, np.zeros(3), h, 1), atol=1e-13)


def test_brownian_scaling_on_heisenberg():
    sys = load_fixture("heisenberg")
    kw = dict(k=6, n_paths=20000, seed=5)
    one = simulate_endpoints(sys, np.zeros(3), 1.0, **kw).endpoints
    half = simulate_endpoints(sys, np.zeros(3), 0.5, **kw).endpoints
    scale = np.array([0.5, 0.5, 0.25])
    # same noise: the dilation is exact up to rounding
    np.testing.assert_allclose(half, one * scale, atol=1e-13)
    other = simulate_endpoints(sys, np.zeros(3), 0.5, k=6, n_paths=20000, seed=6).endpoints / scale
    for f in (lambda y: y, lambda y: y * y):
        a, b = f(one), f(other)
        se = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b))
        assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 3.5 * se)


def test_wong_zakai_covariance_on_linear_system():
    sys = load_fixture("counterexample")
    exact = counterexample_exact(1.0, 0.0).covariance
    for k in (5, 6):
        Y = simulate_endpoints(sys, np.zeros(2), 1.0, k, 40000, seed=3).endpoints
        S = np.cov(Y, rowvar=False)
        # standard error of a covariance entry: sqrt((s_ii s_jj + s_ij^2) / N)
        se = np.sqrt((np.outer(np.diag(exact), np.diag(exact)) + exact ** 2) / len(Y))
        assert np.all(np.abs(S - exact) < 4 * se)


def test_importance_weights_are_unbiased():
    sys = load_fixture("elliptic")
    shift = CMPath.line([1.0, 2.0])
    eps = 0.5
    # at moderate noise the likelihood ratio has mean one
    wide = simulate_endpoints(sys, np.zeros(2), 2.0, 4, 40000, seed=9, shift=shift)
    assert wide.weights.mean() == pytest.approx(1.0, abs=0.05)
    b = simulate_endpoints(sys, np.zeros(2), eps, 4, 40000, seed=9, shift=shift)
    est = estimate_density(b.endpoints, [1.0, 2.0], weights=b.weights, epsilon=eps)
    exact = math.exp(-0.5 * 5 / eps ** 2) / (2 * math.pi * eps ** 2)
    assert abs(est.p_hat - exact) < 4 * est.stderr
    raw = estimate_density(b.endpoints, [1.0, 2.0], weights=b.weights, epsilon=eps, tilt=False)
    assert abs(raw.p_hat - exact) > abs(est.p_hat - exact)


def test_kde_on_gaussian(rng):
    Y = rng.standard_normal((50000, 2))
    est = estimate_density(Y, [0.0, 0.0])
    assert est.p_hat == pytest.approx(1 / (2 * math.pi), rel=0.03)
    assert est.stderr > 0
    proj = estimate_density(np.c_[Y, rng.standard_normal(50000)], [0.0], projection=[2])
    assert proj.p_hat == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.03)


def test_kde_bias_shrinks_with_refinement():
    # quasi-random draws from the exact endpoint law keep sampling noise far
    # below the smoothing bias, so the refinement trend is visible
    exact = counterexample_exact(1.0, 0.0)
    L = np.linalg.cholesky(exact.covariance)
    errs = []
    for j, bw in enumerate((1.0, 0.5, 0.25)):
        n = 4096 * 4 ** j
        u = qmc.Sobol(2, scramble=True, seed=7).random(n)
        Y = norm.ppf(u) @ L.T
        errs.append(abs(estimate_density(Y, [0.0, 0.0], bandwidth=bw).p_hat - exact.p))
    assert errs[1] < 0.6 * errs[0] and errs[2] < 0.6 * errs[1]


def test_simulated_density_matches_closed_form():
    sys = load_fixture("counterexample")
    exact = counterexample_exact(1.0, 0.0).p
    Y = simulate_endpoints(sys, np.zeros(2), 1.0, 6, 64000, seed=21).endpoints
    est = estimate_density(Y, [0.0, 0.0])
    assert abs(est.p_hat - exact) < 3 * est.stderr + 0.02 * exact


def test_density_guards(rng):
    with pytest.raises(DensityError):
        estimate_density(rng.standard_normal((10, 2)), [0, 0])
    Y = np.c_[rng.standard_normal(2000), np.zeros(2000)]
    with pytest.raises(DensityError):
        estimate_density(Y, [0, 0])


def test_no_blowups_on_fixtures(any_system):
    name, sys = any_system
    b = simulate_endpoints(sys, np.zeros(sys.n), 1.0, 6, 2000, seed=1)
    assert b.blowups == 0 and b.n == 2000


def test_config_hash_is_stable():
    cfg = SimConfig(epsilons=(0.5,), seed=3)
    assert config_hash(cfg.to_dict()) == config_hash(SimConfig(epsilons=[0.5], seed=3).to_dict())
    assert config_hash(cfg.to_dict()) != config_hash(SimConfig(epsilons=(0.5,), seed=4).to_dict())
    assert "workers" not in cfg.to_dict()
    with pytest.raises(ValueError):
        SimConfig(steps=2)


def test_conditioned_paths_land_near_target():
    sys = load_fixture("elliptic")
    con = EndpointConstraint([0.0, 0.0], [0.5, 0.0])
    cfg = SimConfig(n_paths=20000, steps=5, seed=4)
    cp = conditioned_paths(sys, [0.0, 0.0], con, 1.0, 0.2, cfg)
    assert cp.count > 0
    assert np.all(np.linalg.norm(cp.states[:, -1] - [0.5, 0.0], axis=1) < 0.2)
    # the pinned mean of Brownian motion is the straight line
    mid = cp.weighted_mean(cp.states[:, 16])
    assert np.linalg.norm(mid - [0.25, 0.0]) < 0.1


def test_skeleton_on_dyadic():
    sys = load_fixture("heisenberg")
    h = CMPath.line([1.0, 0.0])
    vals = skeleton_on_dyadic(sys, np.zeros(3), h, 3)
    np.testing.assert_allclose(vals[:, 0], np.linspace(0, 1, 9), atol=1e-14)


def test_ldp_rows_on_pinned_brownian_motion():
    sys = load_fixture("elliptic")
    con = EndpointConstraint([0.0, 0.0], [1.0, 2.0])
    rate = minimize_energy(sys, con, RateOptions(segments=16, restarts=2))
    cfg = SimConfig(epsilons=(0.7, 0.5), n_paths=20000, steps=6, seed=1, ball_level=4)
    rows = ldp_verify(sys, [0.0, 0.0], con, cfg, rate)
    assert [r.epsilon for r in rows] == [0.7, 0.5]
    for r in rows:
        assert r.minus_rate == pytest.approx(-2.5, abs=1e-6)
        assert math.isfinite(r.gap) and r.blowups == 0
        exact = math.log(math.exp(-2.5 / r.epsilon ** 2) / (2 * math.pi * r.epsilon ** 2))
        assert r.eps2_log_p == pytest.approx(r.epsilon ** 2 * exact, abs=0.05)
        assert 0 <= r.ball_fraction <= 1
