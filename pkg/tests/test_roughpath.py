import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypoldp.roughpath import (BesovParams, Increment, RoughPath, batch_homogeneous_norms,
                               besov_dist, besov_terms, chen_combine, dilate, holder_dist,
                               homogeneous_norm, lift_piecewise_linear, young_translate)
from hypoldp.skeleton import CMPath

samples = arrays(np.float64, (9, 2), elements=st.floats(-3, 3, allow_nan=False))


def circle(k, rho=1.0):
    t = np.linspace(0, 1, 2 ** k + 1)
    return rho * np.c_[np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)]


def test_besov_parameter_validation():
    assert BesovParams().violations() == []
    with pytest.raises(ValueError):
        BesovParams(0.4, 2)
    assert BesovParams(0.4, 2, strict=False).violations()
    with pytest.raises(ValueError):
        BesovParams(0.45, 0)


def test_chen_requires_adjacency():
    a = Increment(0.0, 0.5, np.ones(2), np.zeros((2, 2)))
    b = Increment(0.6, 1.0, np.ones(2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        chen_combine(a, b)


@settings(max_examples=40, deadline=None)
@given(samples)
def test_chen_identity_on_every_split(X):
    rp = lift_piecewise_linear(X)
    I, J, d1, d2 = rp.pair_increments()
    lookup = {(i, j): (a, b) for i, j, a, b in zip(I, J, d1, d2)}
    for (i, j), (a1, a2) in lookup.items():
        for m in range(i + 1, j):
            l1, l2 = lookup[(i, m)]
            r1, r2 = lookup[(m, j)]
            np.testing.assert_allclose(l1 + r1, a1, atol=1e-12)
            np.testing.assert_allclose(l2 + r2 + np.outer(l1, r1), a2, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(samples, samples)
def test_geometric_condition_preserved(X, H):
    rp = lift_piecewise_linear(X)
    assert rp.symmetric_defect() < 1e-12
    assert young_translate(rp, H).symmetric_defect() < 1e-11
    assert dilate(rp, 0.3).symmetric_defect() < 1e-12
    assert rp.coarsen(1).symmetric_defect() < 1e-11


@settings(max_examples=40, deadline=None)
@given(samples, samples)
def test_translation_equals_lift_of_sum(X, H):
    a = young_translate(lift_piecewise_linear(X), H)
    b = lift_piecewise_linear(X + H)
    np.testing.assert_allclose(a.level1, b.level1, atol=1e-12)
    np.testing.assert_allclose(a.level2, b.level2, atol=1e-12)


def test_translation_by_cm_path(rng):
    X = rng.standard_normal((17, 2))
    h = CMPath.uniform(rng.standard_normal((16, 2)))
    a = young_translate(lift_piecewise_linear(X), h)
    b = lift_piecewise_linear(X + h(np.linspace(0, 1, 17)))
    np.testing.assert_allclose(a.level2, b.level2, atol=1e-12)


def test_dilation_homogeneity(rng):
    rp = lift_piecewise_linear(rng.standard_normal((17, 2)))
    p = BesovParams()
    for eps in (0.1, 0.5, 3.0):
        np.testing.assert_array_equal(dilate(rp, eps).level1, eps * rp.level1)
        np.testing.assert_array_equal(dilate(rp, eps).level2, eps * eps * rp.level2)
        assert homogeneous_norm(dilate(rp, eps), p) == pytest.approx(eps * homogeneous_norm(rp, p),
                                                                    rel=1e-12)


def test_coarsen_matches_increments(rng):
    rp = lift_piecewise_linear(rng.standard_normal((33, 3)))
    c = rp.coarsen(2)
    for k in range(4):
        inc = rp.increment(8 * k, 8 * (k + 1))
        np.testing.assert_allclose(c.level1[k], inc.level1, atol=1e-13)
        np.testing.assert_allclose(c.level2[k], inc.level2, atol=1e-13)
    with pytest.raises(ValueError):
        rp.coarsen(6)


@pytest.mark.parametrize("rho", [1.0, 0.5])
def test_circle_area(rho):
    rp = lift_piecewise_linear(circle(12, rho))
    w2 = rp.increment(0, rp.segments).level2
    area = 0.5 * (w2[0, 1] - w2[1, 0])
    assert abs(area - np.pi * rho ** 2) <= 1e-6 * np.pi * rho ** 2


def test_distances_are_metrics(rng):
    a = lift_piecewise_linear(rng.standard_normal((17, 2)))
    b = lift_piecewise_linear(rng.standard_normal((17, 2)))
    assert holder_dist(a, a, 0.45) == 0.0
    assert besov_dist(a, a) == 0.0
    assert besov_dist(a, b) == pytest.approx(besov_dist(b, a))
    assert holder_dist(a, b, 0.45) > 0


def test_grid_mismatch_rejected(rng):
    a = lift_piecewise_linear(rng.standard_normal((17, 2)))
    b = lift_piecewise_linear(rng.standard_normal((9, 2)))
    with pytest.raises(ValueError):
        besov_dist(a, b)


def test_lift_needs_dyadic_count(rng):
    with pytest.raises(ValueError):
        lift_piecewise_linear(rng.standard_normal((10, 2)))
    rp = lift_piecewise_linear(rng.standard_normal((10, 2)), require_dyadic=False)
    assert rp.level is None


def test_batch_norms_match_single(rng):
    P = np.cumsum(rng.standard_normal((5, 33, 2)), axis=1)
    expected = [homogeneous_norm(lift_piecewise_linear(p - p[0])) for p in P]
    np.testing.assert_allclose(batch_homogeneous_norms(P, chunk=2), expected, rtol=1e-12)


def test_besov_level1_converges_on_refinement():
    # straight line w(t) = t e_1: integrate |t - s|^(4m(1 - alpha) - 1) over the unit square
    p = BesovParams()
    m, a = p.m, p.alpha
    exact = (2.0 / ((4 * m * (1 - a)) * (4 * m * (1 - a) + 1))) ** (1 / (4 * m))
    errs = []
    for k in (4, 6, 8):
        t = np.linspace(0, 1, 2 ** k + 1)
        rp = lift_piecewise_linear(np.c_[t, 0 * t])
        errs.append(abs(besov_terms(rp, None, p)[0] - exact))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02


def test_csv_round_trip(tmp_path, rng):
    rp = lift_piecewise_linear(rng.standard_normal((9, 2)))
    rp.to_csv(tmp_path / "rp.csv")
    data = np.loadtxt(tmp_path / "rp.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 2:4], rp.level1)
    np.testing.assert_array_equal(data[:, 4:].reshape(-1, 2, 2), rp.level2)
