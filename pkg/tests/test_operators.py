import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.linalg import expm

from nonsym.builders import example_stable_conductance
from nonsym.conductance import Conductance, DecomposedConductance, decompose, nearest_neighbor
from nonsym.lattice import Ball, LatticeFunction, LatticePoint, Window
from nonsym.operators import (SolverError, assemble, bilinear_form, exact_rows, garding_sector_constants,
                              green_vector, inner_product, killed_semigroup, maximum_principle_check,
                              resolvent, resolvent_identity_residual, semigroup_apply, uniformization_terms)


def _drifted(n, d=1):
    table = {}
    for i in range(d):
        e = [0] * d
        e[i] = 1
        table[tuple(e)] = Fraction(7, 10)
        e[i] = -1
        table[tuple(e)] = Fraction(3, 10)
    table[(2,) + (0,) * (d - 1)] = Fraction(1, 10)
    table[(-2,) + (0,) * (d - 1)] = Fraction(1, 5)
    return decompose(Conductance.from_table(n, 2.0, table, d=d))


def test_torus_rows_nearest_neighbour():
    rows = exact_rows(nearest_neighbor(2, 1), Window.torus(2, 4))
    for i, r in enumerate(rows):
        assert r[i] == -8
        assert sorted(v for k, v in r.items() if k != i) == [4, 4]
        assert sum(r.values()) == 0


def test_torus_constants_are_harmonic():
    L = assemble(_drifted(8), Window.torus(8, 16))
    assert np.all(np.abs(L.apply(np.full(L.size, 3.0))) <= 1e-12)
    assert np.all(np.abs(L.row_sums()) <= 1e-12 * abs(L.matrix.diagonal()).max())


def test_killed_interior_row_equals_full_row():
    dc = _drifted(8)
    w = Window.cube(8, 2.0, 1)
    full = assemble(dc, Window.torus(8, 64))
    killed = assemble(dc, w, mode="killed")
    i = int(np.nonzero(np.all(killed.coords == 0, axis=1))[0][0])
    rk = killed.matrix.getrow(i).toarray().ravel()
    rf = full.matrix.getrow(0).toarray().ravel()
    assert sorted(rk[rk != 0]) == sorted(rf[rf != 0])


def test_full_mode_detects_leakage():
    with pytest.raises(ValueError, match="boundary leakage"):
        assemble(decompose(nearest_neighbor(4, 1)), Window.cube(4, 1.0, 1))


def test_bilinear_form_indicator_example():
    w = Window.torus(2, 4)
    u = LatticeFunction.on_window(w, [0, 1, 0, 0])
    total, sym, asym = bilinear_form(decompose(nearest_neighbor(2, 1)), u, u, w)
    assert (total, sym, asym) == pytest.approx((4, 4, 0))


def test_bilinear_form_constants_and_symmetric():
    w = Window.torus(4, 8)
    one = LatticeFunction.on_window(w, np.ones(w.size))
    assert bilinear_form(_drifted(4), one, one, w) == pytest.approx((0, 0, 0), abs=1e-12)
    u = LatticeFunction.on_window(w, np.arange(w.size) % 3)
    total, sym, asym = bilinear_form(decompose(nearest_neighbor(4, 1)), u, u, w)
    assert asym == 0 and sym >= 0


def test_duality_with_generator(rng):
    dc = _drifted(4, 2)
    w = Window.torus(4, (6, 5), 2)
    L = assemble(dc, w)
    for _ in range(5):
        u = rng.standard_normal(w.size)
        v = rng.standard_normal(w.size)
        total, sym, asym = bilinear_form(dc, L.function(u), L.function(v), w)
        assert total == pytest.approx(sym + asym, abs=1e-10)
        assert total == pytest.approx(inner_product(-L.apply(u), v, 4, 2), abs=1e-10)


def test_garding_symmetric_and_example_kernel():
    rep = garding_sector_constants(decompose(nearest_neighbor(8, 1)), Window.cube(8, 1.0, 1), trials=50)
    assert rep["c1"] == 0 and rep["c1_exact"] == 0
    c2 = []
    for n in (8, 16, 32):
        r = garding_sector_constants(example_stable_conductance(n, 1.5, 0.5, 0.9), Window.cube(n, 1.0, 1), trials=50)
        assert r["c1"] <= r["c1_exact"] + 1e-12
        assert r["c2"] <= r["c2_exact"] + 1e-9
        c2.append(r["c2_exact"])
    assert max(c2) <= 2 * min(c2)


def test_semigroup_basic_properties(rng):
    w = Window.torus(1, 3)
    L = assemble(decompose(nearest_neighbor(1, 1)), w)
    f = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(semigroup_apply(L, f, 0.0), f)
    t = 1e-3
    u = semigroup_apply(L, f, t)
    assert u == pytest.approx(expm(t * L.matrix.toarray()) @ f, abs=1e-13)
    assert abs(u[0] - (1 - 2 * t)) <= 4 * t * t
    assert np.allclose(semigroup_apply(L, np.ones(3), 0.7), 1, atol=1e-12)


def test_semigroup_law(rng):
    dc = _drifted(4)
    L = assemble(dc, Window.torus(4, 12))
    f = rng.standard_normal(L.size)
    a = semigroup_apply(L, f, 0.05)
    b = semigroup_apply(L, semigroup_apply(L, f, 0.02), 0.03)
    assert np.max(np.abs(a - b)) <= 10 * 1e-13 * max(1, np.abs(f).sum())


def test_killed_nested_balls_and_domination(rng):
    n = 8
    dc = _drifted(n)
    w = Window.cube(n, 2.0, 1)
    x0 = LatticePoint.origin(1, n)
    small = assemble(dc, w, mode="killed", inner=Ball(x0, 0.5))
    big = assemble(dc, w, mode="killed", inner=Ball(x0, 1.0))
    sel = Ball(x0, 0.5).contains_coords(big.coords)
    for _ in range(5):
        f = rng.random(big.size)
        ps = killed_semigroup(small, f[sel], 0.05)
        pb = killed_semigroup(big, f, 0.05)
        assert np.all(ps >= -1e-12)
        assert np.all(ps <= pb[sel] + 1e-12)
        assert np.all(pb <= f.max() + 1e-12)


def test_killed_mass_decays_geometrically():
    L = assemble(decompose(nearest_neighbor(8, 1)), Window.cube(8, 1.0, 1), mode="killed",
                 inner=Ball(LatticePoint.origin(1, 8), 0.5))
    one = np.ones(L.size)
    m = [semigroup_apply(L, one, t).max() for t in (0.5, 1.0, 1.5, 2.0)]
    q = [b / a for a, b in zip(m, m[1:])]
    assert all(x < 1 for x in q)
    assert max(q) - min(q) < 1e-3


def test_killed_semigroup_requires_killed_mode():
    L = assemble(decompose(nearest_neighbor(2, 1)), Window.torus(2, 4))
    with pytest.raises(ValueError):
        killed_semigroup(L, np.ones(4), 0.1)


def test_resolvent_constants_and_large_lambda(rng):
    L = assemble(_drifted(4), Window.torus(4, 16))
    assert np.allclose(resolvent(L, np.ones(L.size), 2.5), 1 / 2.5)
    f = rng.standard_normal(L.size)
    lam = 1e6
    u = resolvent(L, f, lam)
    assert np.linalg.norm(lam * u - f) <= 10 * np.linalg.norm(f) * L.rates.max() / lam


def test_resolvent_identity_residual(rng):
    dc = _drifted(8)
    w = Window.cube(8, 2.0, 1)
    L = assemble(dc, w, mode="killed")
    for _ in range(5):
        f = rng.standard_normal(L.size)
        g = rng.standard_normal(L.size)
        u = resolvent(L, f, 1.5)
        assert resolvent_identity_residual(dc, w, u, f, g, 1.5) <= 1e-8


def test_green_vector_examples():
    n = 64
    dc = decompose(nearest_neighbor(n, 1))
    w = Window.cube(n, 1.0, 1)
    x0 = LatticePoint.origin(1, n)
    L = assemble(dc, w, mode="killed", inner=Ball(x0, 0.5))
    g = green_vector(L)
    X = L.coords[:, 0] / n
    assert g[np.argmin(np.abs(X))] == pytest.approx(0.125, rel=1e-9)
    assert np.allclose(g, (0.25 - X ** 2) / 2, atol=1e-12)
    single = assemble(dc, w, mode="killed", inner=Ball(x0, 0.5 / n))
    assert green_vector(single)[0] == pytest.approx(1 / (2 * n ** 2))
    L2 = assemble(dc, w, mode="killed", inner=Ball(x0, 0.75))
    g2 = green_vector(L2)
    sel = Ball(x0, 0.5).contains_coords(L2.coords)
    assert np.all(g2[sel] >= g)


def test_green_vector_singular():
    z = Conductance.from_table(4, 2.0, {}, d=1)
    L = assemble(decompose(z), Window.cube(4, 1.0, 1), mode="killed")
    with pytest.raises(SolverError, match="singular"):
        green_vector(L)


def test_maximum_principle():
    L = assemble(_drifted(8), Window.cube(8, 1.0, 1), mode="killed")
    rep = maximum_principle_check(L, trials=10, seed=3)
    assert rep["passed"] and rep["max_nonpositive"] <= 1e-10 and rep["min_nonnegative"] >= -1e-12
    assert np.all(killed_semigroup(L, np.zeros(L.size), 0.3) == 0)


def test_uniformization_cap():
    assert uniformization_terms(0.0, 1e-13) == 0
    with pytest.raises(SolverError):
        uniformization_terms(1e7, 1e-13)


def test_coo_export():
    L = assemble(decompose(nearest_neighbor(2, 1)), Window.torus(2, 4))
    lines = L.to_coo_text().splitlines()
    assert len(lines) == 12 and lines[0].split()[:2] == ["0", "0"]
