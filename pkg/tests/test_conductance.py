import math
from fractions import Fraction

import numpy as np
import pytest

from nonsym.conductance import (AssumptionReport, Conductance, DecomposedConductance, check_ctail,
                                check_k1, check_k2, check_nnrw, check_poinc_sampled, decompose,
                                nearest_neighbor, poincare_constant_exact, second_moment, total_rate)
from nonsym.lattice import LatticePoint, Window


def _power_table(n, alpha, kmax):
    return Conductance.from_table(n, alpha, {(k,): float(abs(k)) ** (-1 - alpha)
                                             for k in range(-kmax, kmax + 1) if k}, d=1)


def test_decompose_two_point_example():
    c = Conductance.from_edges(4, 2.0, {((0,), (1,)): Fraction("0.7"), ((1,), (0,)): Fraction("0.3")})
    dc = decompose(c)
    assert dc.sym.exact_weight((0,), (1,)) == Fraction(1, 2)
    assert dc.asym.exact_weight((0,), (1,)) == Fraction(1, 5)
    assert dc.asym.exact_weight((1,), (0,)) == Fraction(-1, 5)


def test_decompose_symmetric_input_has_zero_asym():
    dc = decompose(nearest_neighbor(8, 2))
    assert dc.asym.is_zero()


def test_reconstruction_exact_on_random_sparse(rng):
    edges = {}
    for _ in range(60):
        x = tuple(int(v) for v in rng.integers(-3, 4, 2))
        h = tuple(int(v) for v in rng.integers(-2, 3, 2))
        if any(h):
            edges[(x, tuple(a + b for a, b in zip(x, h)))] = Fraction(int(rng.integers(1, 50)), int(rng.integers(1, 9)))
    dc = decompose(Conductance.from_edges(4, 2.0, edges))
    assert dc.reconstruction_error() == 0


def test_total_rate_examples():
    assert total_rate(nearest_neighbor(4, 2), LatticePoint.origin(2, 4)) == 2
    empty = Conductance.from_table(4, 2.0, {}, d=1)
    assert total_rate(empty, LatticePoint.origin(1, 4)) == 0
    tab = Conductance.from_table(4, 1.0, {(1,): 0.4, (-1,): 0.4, (3,): 0.1, (-3,): 0.1}, d=1)
    for x in (-5, 0, 7):
        assert total_rate(tab, LatticePoint((x,), 4)) == pytest.approx(1.0)


def test_ctail_nearest_neighbour_is_zero():
    dc = decompose(nearest_neighbor(4, 1))
    rep = check_ctail(dc, [0.5], Window.cube(4, 1.0, 1))
    assert rep.passed and rep.constants_found["c"] == 0


def test_ctail_power_law_matches_direct_sum():
    n, kmax = 16, 4096
    dc = decompose(_power_table(n, 1.0, kmax))
    rep = check_ctail(dc, [0.5], Window.cube(n, 0.25, 1))
    tail = n * 2 * math.fsum(k ** -2.0 for k in range(9, kmax + 1))
    assert rep.constants_found["c"] == pytest.approx(tail * 0.5, rel=1e-12)
    assert rep.constants_found["c"] == pytest.approx(2.0, rel=0.1)


def test_ctail_unbounded_kernel_needs_reach():
    c = Conductance.from_function(4, 1.0, [(1,), (-1,)], lambda X: np.full((len(X), 2), 0.5), d=1)
    dc = DecomposedConductance(c, Conductance.from_table(4, 1.0, {}, d=1, signed=True), full=c)
    with pytest.raises(ValueError, match="window margin insufficient"):
        check_ctail(dc, [2.0], Window.cube(4, 1.0, 1))


def test_ctail_zero_conductance():
    z = Conductance.from_table(4, 2.0, {}, d=1, range_bound=1.0)
    rep = check_ctail(decompose(z), [0.5], Window.cube(4, 1.0, 1))
    assert rep.passed and rep.constants_found["c"] == 0


def test_k1_symmetric_is_zero():
    rep = check_k1(decompose(nearest_neighbor(8, 1)), math.inf, Window.cube(8, 1.0, 1))
    assert rep.passed and rep.constants_found["A"] == 0


def test_k1_nearest_neighbour_with_drift():
    n = 8
    c = Conductance.from_table(n, 2.0, {(1,): Fraction(6, 10), (-1,): Fraction(4, 10)}, d=1)
    rep = check_k1(decompose(c), math.inf, Window.cube(n, 1.0, 1))
    # W = n^2 * 2 * 0.1^2 / 0.5
    assert rep.constants_found["A"] == pytest.approx(2.56)


def test_k1_witness_when_asym_without_support():
    n = 4
    sym = Conductance.from_table(n, 2.0, {(1,): 0.5, (-1,): 0.5}, d=1)
    asym = Conductance.from_table(n, 2.0, {(2,): 0.1, (-2,): -0.1}, d=1, signed=True)
    rep = check_k1(DecomposedConductance(sym, asym, full=sym + asym), math.inf, Window.cube(n, 1.0, 1))
    assert not rep.passed and rep.witnesses


def test_k2_cases():
    w = Window.cube(8, 1.0, 1)
    assert check_k2(decompose(nearest_neighbor(8, 1)), w).constants_found["D"] == 0
    c = Conductance.from_table(8, 2.0, {(1,): Fraction(3, 4), (-1,): Fraction(1, 4)}, d=1)
    rep = check_k2(decompose(c), w, D=0.5)
    assert rep.passed and rep.constants_found["D_min"] <= 0.5


def test_k2_negative_conductance_raises():
    c = Conductance.from_table(8, 2.0, {(1,): -0.1, (-1,): 0.5}, d=1, signed=True)
    dc = DecomposedConductance(c, Conductance.from_table(8, 2.0, {}, d=1, signed=True), full=c)
    with pytest.raises(ValueError):
        check_k2(dc, Window.cube(8, 1.0, 1))


def test_nnrw():
    w = Window.cube(4, 1.0, 2)
    rep = check_nnrw(decompose(nearest_neighbor(4, 2)), w)
    assert rep.passed and rep.constants_found["eps"] == 0.5
    edges = {}
    for x in w.coords().tolist():
        for h in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            edges[(tuple(x), (x[0] + h[0], x[1] + h[1]))] = Fraction(1, 2)
    del edges[((0, 0), (1, 0))]
    del edges[((1, 0), (0, 0))]
    rep = check_nnrw(decompose(Conductance.from_edges(4, 2.0, edges)), w)
    assert not rep.passed
    assert {"x": [0, 0], "h": [1, 0]} in rep.witnesses
    assert {"x": [1, 0], "h": [-1, 0]} in rep.witnesses


def test_second_moment():
    w = Window.cube(8, 1.0, 1)
    assert second_moment(decompose(nearest_neighbor(8, 1)), 0.5, w) == pytest.approx(1.0)
    z = Conductance.from_table(8, 2.0, {}, d=1)
    assert second_moment(decompose(z), 0.5, w) == 0
    n = 32
    val = second_moment(decompose(_power_table(n, 1.0, 2 * n)), 1.0, Window.cube(n, 0.5, 1))
    assert val == pytest.approx(2 * (n - 1) / n)


def test_poincare_sampled_vs_exact():
    dc = decompose(nearest_neighbor(16, 1))
    exact = poincare_constant_exact(dc, 1.0)
    rep = check_poinc_sampled(dc, 1.0, trials=10, seed=1)
    assert rep.passed
    assert exact / 2 <= rep.constants_found["c"] <= exact * (1 + 1e-9)


def test_poincare_disconnected_fails():
    z = Conductance.from_table(8, 2.0, {}, d=1, range_bound=1.0)
    rep = check_poinc_sampled(decompose(z), 0.5, trials=3, seed=0)
    assert not rep.passed and rep.witnesses


def test_report_rejects_witnesses_on_pass():
    with pytest.raises(ValueError):
        AssumptionReport("K1", {}, True, [{"x": 0}])
    assert '"assumption_id": "K1"' in AssumptionReport("K1", {"A": 0.0}).to_json()


def test_text_roundtrip_is_exact():
    c = Conductance.from_table(4, 2.0, {(1,): Fraction(1, 3), (-1,): Fraction(2, 3)}, d=1)
    w = Window.cube(4, 0.5, 1)
    back = Conductance.from_text(c.to_text(w))
    for x in range(-2, 3):
        assert back.exact_weight((x,), (x + 1,)) == Fraction(1, 3)
