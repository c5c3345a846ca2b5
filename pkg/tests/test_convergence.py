import json
import math

import numpy as np
import pytest
from scipy import integrate

from nonsym.builders import build_nonlocal, make_target
from nonsym.chain import McConfig
from nonsym.conductance import decompose, nearest_neighbor
from nonsym.convergence import (BoundaryInfluenceError, ExperimentReport, RestrictExtend, drift_benchmark,
                                extend, extrapolated_limit, harnack_ratio, harnack_ratio_single, holder_modulus,
                                resolvent_cauchy, restrict, stable_benchmark, sup_distance, survival_exceedance,
                                survival_threshold, uniformity_slope)
from nonsym.lattice import LatticeFunction, LatticePoint, Window
from nonsym.operators import assemble


def gauss(X):
    return np.exp(-(np.atleast_2d(X) ** 2).sum(axis=1))


def _nn_family(ns, d=1):
    return {n: decompose(nearest_neighbor(n, d)) for n in ns}


def test_restrict_samples_lattice_points():
    w = Window(4, (-2,), (2,))
    g = restrict(lambda X: X[:, 0] ** 2, 4, w)
    np.testing.assert_allclose(g.values, [0.25, 0.0625, 0.0, 0.0625, 0.25])
    with pytest.raises(ValueError):
        restrict(gauss, 8, w)


def test_extend_is_cell_constant():
    g = LatticeFunction(np.array([[0], [1], [2]]), 4, [1.0, 2.0, 3.0])
    Eg = extend(g, outside=-1.0)
    # the cell of x is [k/n, (k+1)/n) with k = floor(n x)
    np.testing.assert_array_equal(Eg(np.array([[0.0], [0.2], [0.25], [0.74], [0.75], [-0.01]])),
                                  [1.0, 1.0, 2.0, 3.0, -1.0, -1.0])


def test_restrict_then_extend_on_lattice_points_is_identity(rng):
    w = Window(8, (-8, -8), (8, 8))
    re = RestrictExtend(8, rng.integers(-8, 9, size=(20, 2)) / 8)
    g = re.restrict(gauss, w)
    np.testing.assert_allclose(re.extend(g), gauss(re.K), rtol=0, atol=1e-15)


def test_sup_distance_is_a_metric(rng):
    w = Window(4, (-4,), (4,))
    K = np.linspace(-1, 0.99, 50)[:, None]
    a, b, c = (LatticeFunction.on_window(w, rng.normal(size=w.size)) for _ in range(3))
    assert sup_distance(a, a, K) == 0
    assert sup_distance(a, b, K) == sup_distance(b, a, K)
    assert sup_distance(a, c, K) <= sup_distance(a, b, K) + sup_distance(b, c, K) + 1e-15


def _exact_resolvent(x, lam=1.0):
    # (lam - d^2/dx^2)^{-1} has kernel exp(-sqrt(lam)|x - y|) / (2 sqrt(lam))
    s = math.sqrt(lam)
    k = lambda y: math.exp(-s * abs(x - y)) / (2 * s) * math.exp(-y * y)
    return integrate.quad(k, -np.inf, x)[0] + integrate.quad(k, x, np.inf)[0]


def test_resolvent_cauchy_for_simple_random_walk():
    K = np.linspace(-1, 1, 9)[:, None]
    rep = resolvent_cauchy(_nn_family([8, 16, 32, 64]), gauss, 1.0, K, radius=10.0,
                           oracle=decompose(nearest_neighbor(128, 1)))
    assert rep.passed
    assert rep.summary["rate"] == pytest.approx(2.0, abs=0.1)
    gaps = [r["distance_to_next"] for r in rep.rows[:-1]]
    assert gaps == sorted(gaps, reverse=True)
    pair = np.array(rep.summary["pairwise"])
    np.testing.assert_array_equal(pair, pair.T)
    assert np.all(np.diag(pair) == 0)


def test_resolvent_matches_heat_equation_oracle():
    K = np.linspace(-1, 1, 9)[:, None]
    exact = np.array([_exact_resolvent(x) for x in K[:, 0]])
    rep = resolvent_cauchy(_nn_family([16, 32]), gauss, 1.0, K, radius=12.0,
                           oracle=decompose(nearest_neighbor(64, 1)))
    from nonsym.convergence import _resolvent_on
    u = _resolvent_on(decompose(nearest_neighbor(64, 1)), gauss, 1.0, 12.0)
    assert np.max(np.abs(extend(u)(K) - exact)) < 1e-5
    assert rep.rows[-1]["distance_to_oracle"] < rep.rows[0]["distance_to_oracle"]


def test_resolvent_boundary_influence_is_detected():
    with pytest.raises(BoundaryInfluenceError):
        resolvent_cauchy(_nn_family([8, 16]), gauss, 0.01, np.zeros((1, 1)), radius=1.0)


def test_drift_benchmark_without_drift():
    rep = drift_benchmark(_nn_family([8, 16], d=2), [0.0, 0.0], 0.25, McConfig(seed=3, paths=20000))
    assert rep.passed
    np.testing.assert_allclose(rep.rows[-1]["cov_target"], [[0.5, 0], [0, 0.5]])


def test_stable_benchmark_symmetric_kernel():
    dc = build_nonlocal(make_target("stable_K", 1.0), 64, range_cut=32.0)
    rep = stable_benchmark(dc, McConfig(seed=1, paths=20000))
    assert rep.summary["ks"] < 0.05
    assert abs(rep.summary["ratio"] - 1) < 0.1
    assert rep.passed


def test_holder_flat_for_constants():
    L = assemble(decompose(nearest_neighbor(8, 1)), Window.torus(8, 16))
    rep = holder_modulus({8: L}, lambda X: np.full(len(X), 2.0), 0.1, [0.125, 0.25])
    assert rep.summary["flat"]
    assert rep.rows[0]["omega"] == [0.0, 0.0]


def test_holder_exponent_positive_and_stable():
    Ls = {n: assemble(decompose(nearest_neighbor(n, 1)), Window.torus(n, 4 * n)) for n in (8, 16, 32)}
    f = lambda X: (np.abs(X[:, 0] - 2 * np.floor(X[:, 0] / 2) - 1) < 0.5).astype(float)
    rep = holder_modulus(Ls, f, 0.05, [0.125, 0.25, 0.5], K=0.5)
    assert all(g > 0 for g in rep.summary["gammas"])
    assert rep.passed


def test_harnack_ratio_for_constant_data_is_counting_measure():
    # u = 1 is harmonic on the torus, so the ratio is #B_{R/2} * (nR/2)^{-d}
    L = assemble(decompose(nearest_neighbor(8, 1)), Window.torus(8, 16))
    assert harnack_ratio_single(L, np.ones(L.size), 0.5, LatticePoint((8,), 8)) == pytest.approx(1.5, rel=1e-12)
    L2 = assemble(decompose(nearest_neighbor(8, 2)), Window.torus(8, 16, d=2))
    r = harnack_ratio_single(L2, np.ones(L2.size), 0.5, LatticePoint((8, 8), 8))
    assert r == pytest.approx(9 / 4, rel=1e-12)


def test_harnack_ratio_finite_for_bumps():
    rep = harnack_ratio(_nn_family([8, 16]), R=0.5, trials=4, seed=2, boots=50)
    for row in rep.rows:
        assert 1 < row["max_ratio"] < 100
        assert row["excluded"] == 0
    assert "trend" in rep.summary


def test_survival_exceedance_monotone_and_threshold():
    dc = decompose(nearest_neighbor(8, 1))
    p = survival_exceedance(dc, 0.5, 1.0, [0.1, 0.3, 0.6, 1.0])
    assert np.all(np.diff(p) > 0)
    assert 0 <= p[0] < p[-1] <= 1
    t0 = survival_threshold(dc, 0.5, 1.0, 0.25)
    assert survival_exceedance(dc, 0.5, 1.0, t0)[0] == pytest.approx(0.25, abs=1e-6)


def test_uniformity_slope_detects_growth(rng):
    ns = [8, 16, 32, 64]
    flat = [rng.normal(5, 0.1, size=30) for _ in ns]
    grow = [rng.normal(5 + 2 * math.log(n), 0.1, size=30) for n in ns]
    assert uniformity_slope(ns, flat, np.mean, boots=200)["passed"]
    out = uniformity_slope(ns, grow, np.mean, boots=200)
    assert not out["passed"]
    assert out["slope"] == pytest.approx(2.0, abs=0.1)


def test_extrapolated_limit_geometric():
    assert extrapolated_limit([1.5, 1.25, 1.125]) == pytest.approx(1.0, abs=1e-14)
    assert math.isnan(extrapolated_limit([1.0, 2.0, 4.0]))
    assert extrapolated_limit([3.0, 3.0, 3.0]) == 3.0


def test_report_serialisation_round_trip():
    rep = ExperimentReport("x", ["a property"], [{"n": 8, "v": 0.1}, {"n": 16, "w": [1, 2]}],
                           {"ok": True}, True)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "n,v,w"
    assert lines[2] == '16,,"[1, 2]"'
    assert json.loads(rep.to_json())["rows"][0]["v"] == 0.1
