import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from nonsym.chain import (AliasTable, JumpSampler, McConfig, exit_time_mc, fdd_sample, levy_system_check,
                          run_paths, simulate, survival_mc)
from nonsym.conductance import Conductance, decompose, nearest_neighbor
from nonsym.convergence import survival_exceedance
from nonsym.lattice import Ball, LatticePoint, Window
from nonsym.operators import assemble, green_vector


def test_jump_count_is_poisson_at_unit_scale():
    # n = 1, alpha = 2: total rate 2 * (1/2 + 1/2) = 2, so N_1 ~ Poisson(2)
    c = nearest_neighbor(1, 1)
    res = run_paths(JumpSampler(c), (0,), McConfig(seed=5, paths=40000, horizon=1.0))
    k = res["jumps"]
    assert abs(k.mean() - 2.0) < 4 * math.sqrt(2.0 / len(k))
    assert abs(k.var() - 2.0) < 0.08


def test_zero_conductance_never_jumps():
    c = Conductance.from_table(4, 2.0, {(1,): Fraction(0), (-1,): Fraction(0)}, d=1)
    tr = simulate(c, LatticePoint.origin(1, 4), McConfig(seed=1, paths=1, horizon=10.0))
    assert tr.events == []
    assert tr.position(5.0) == LatticePoint.origin(1, 4)


def test_same_seed_same_paths_regardless_of_jobs():
    s = JumpSampler(nearest_neighbor(4, 2))
    a = run_paths(s, (0, 0), McConfig(seed=9, paths=3000, horizon=0.5, block=512, jobs=1))
    b = run_paths(s, (0, 0), McConfig(seed=9, paths=3000, horizon=0.5, block=512, jobs=4))
    c = run_paths(s, (0, 0), McConfig(seed=10, paths=3000, horizon=0.5, block=512))
    assert np.array_equal(a["final"], b["final"])
    assert np.array_equal(a["jumps"], b["jumps"])
    assert not np.array_equal(a["final"], c["final"])


def test_trajectory_csv_is_reproducible():
    c = nearest_neighbor(4, 1)
    cfg = McConfig(seed=2, paths=1, horizon=1.0)
    t1 = simulate(c, LatticePoint.origin(1, 4), cfg).to_csv()
    t2 = simulate(c, LatticePoint.origin(1, 4), cfg).to_csv()
    assert t1 == t2
    assert t1.splitlines()[0] == "t,x_1"


def test_alias_table_encodes_weights(rng):
    w = rng.exponential(size=17)
    w[3] = 0.0
    tab = AliasTable(w)
    np.testing.assert_allclose(tab.probabilities(), w / w.sum(), atol=1e-15)
    draws = tab.sample(np.random.default_rng(1), 200000)
    assert not np.any(draws == 3)
    counts = np.bincount(draws, minlength=17)
    keep = w > 0
    chi = stats.chisquare(counts[keep], 200000 * w[keep] / w.sum())
    assert chi.pvalue > 1e-3


def test_alias_table_rejects_bad_weights():
    with pytest.raises(ValueError):
        AliasTable([0.0, 0.0])
    with pytest.raises(ValueError):
        AliasTable([1.0, -0.5])


def test_holding_times_are_exponential():
    c = nearest_neighbor(2, 1)
    rate = 2 * 2 ** 2 * 1.0
    waits = []
    for p in range(2000):
        tr = simulate(c, LatticePoint.origin(1, 2), McConfig(seed=4, paths=1, horizon=5.0), path=p)
        waits.append(tr.events[0][0])
    assert stats.kstest(waits, "expon", args=(0, 1 / rate)).pvalue > 1e-3


def test_jump_distribution_matches_conductance():
    table = {(1,): Fraction(3, 4), (-1,): Fraction(1, 4), (2,): Fraction(1, 2)}
    s = JumpSampler(Conductance.from_table(4, 2.0, table, d=1))
    p = s.jump_probabilities((0,))
    assert sorted(np.round(p[p > 0], 12)) == [0.166666666667, 0.333333333333, 0.5]


def test_exit_time_matches_green_function():
    # simple random walk with rate 2 n^2 needs (nR)^2 steps to leave (-nR, nR): mean R^2 / 2
    n = 8
    dc = decompose(nearest_neighbor(n, 1))
    x0 = LatticePoint.origin(1, n)
    ball = Ball(x0, 1.0)
    L = assemble(dc, Window.cube(n, 1.0, 1), mode="killed", inner=ball)
    g = float(green_vector(L)[np.all(L.coords == 0, axis=1)][0])
    assert g == pytest.approx(0.5, abs=1e-12)
    mc = exit_time_mc(dc, ball, x0, McConfig(seed=3, paths=20000, horizon=50.0))
    assert mc["ci"][0] - mc["se"] <= g <= mc["ci"][1] + mc["se"]
    assert mc["censored_fraction"] == 0.0


def test_exit_time_requires_start_inside():
    dc = decompose(nearest_neighbor(4, 1))
    with pytest.raises(ValueError):
        exit_time_mc(dc, Ball(LatticePoint.origin(1, 4), 0.5), LatticePoint((5,), 4), McConfig())


def test_survival_mc_agrees_with_killed_semigroup():
    dc = decompose(nearest_neighbor(8, 1))
    grid = [0.2, 0.4, 0.8]
    mc = survival_mc(dc, 0.5, 1.0, grid, McConfig(seed=6, paths=20000))
    exact = survival_exceedance(dc, 0.5, 1.0, grid)
    for p, se, q in zip(mc["exceedance"], mc["se"], exact):
        assert abs(p - q) <= 4 * se + 1e-12
    assert mc["exceedance"] == sorted(mc["exceedance"])


def test_levy_system_balances():
    table = {(1,): Fraction(1, 2), (-1,): Fraction(1, 4), (3,): Fraction(1, 8), (-2,): Fraction(1, 8)}
    c = Conductance.from_table(4, 1.5, table, d=1)
    out = levy_system_check(c, lambda X, Y: ((Y - X) ** 2).sum(axis=1), 1.0,
                            McConfig(seed=8, paths=20000))
    assert out["passed"]
    assert out["jumps_side"]["mean"] > 0


def test_nearest_neighbour_variance_is_2t():
    # each jump is +-1/n at total rate 2 n^2, so Var X_t = 2 t for every n
    t = 0.3
    X = fdd_sample(nearest_neighbor(16, 1), LatticePoint.origin(1, 16), [t], McConfig(seed=11, paths=40000))
    x = X[:, 0, 0]
    se = x.var() * math.sqrt(2.0 / len(x))
    assert abs(x.var() - 2 * t) < 4 * se
    assert abs(x.mean()) < 4 * x.std() / math.sqrt(len(x))


def test_fdd_times_must_increase():
    with pytest.raises(ValueError):
        fdd_sample(nearest_neighbor(4, 1), LatticePoint.origin(1, 4), [0.5, 0.2], McConfig(paths=10))
