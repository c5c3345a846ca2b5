import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate

from nonsym.builders import (CellPartition, DiffusionTarget, JumpTarget, build_gradient_drift, build_local,
                             build_local_symmetric, build_nonlocal, cell_average, example_stable_conductance,
                             make_target, verify_target_convergence)
from nonsym.conductance import check_k2, check_nnrw, decompose, nearest_neighbor
from nonsym.lattice import Window
from nonsym.snnp import coefficient_field


def _const_a(M):
    M = np.asarray(M, dtype=float)
    return lambda X: np.broadcast_to(M, (len(np.atleast_2d(X)),) + M.shape)


def test_cell_partition_counts():
    part = CellPartition(10, 0.5)
    assert part.r_n == Fraction(3, 10)
    assert part.count_in(0.0, 1.0) == 4


def test_cell_average_constant_and_linear():
    part = CellPartition(16, 0.5)
    X = np.arange(0, 16)[:, None]
    assert np.allclose(cell_average(lambda Y: np.full(len(Y), 7.0), part, X), 7.0)
    vals = cell_average(lambda Y: Y[:, 0], part, np.array([[0], [1], [3]]))
    assert np.allclose(vals, float(part.r_n) / 2)


def test_identity_a_gives_nn_weights():
    t = DiffusionTarget(make_target("identity_a", 2), make_target("const_b", 0, 0), d=2, eps0=0.05)
    c = build_local_symmetric(t, 8)
    W = c.weights_at(np.zeros((1, 2), dtype=np.int64))[0]
    assert np.allclose(W[:4], 0.55) and np.allclose(W[4:], 0)
    cf = coefficient_field(build_local(t, 8, Window.cube(8, 1.0, 2)), Window.cube(8, 0.5, 2))
    assert np.allclose(cf.F, 1.1 * np.eye(2))


def test_diag_a_recovered_exactly():
    t = DiffusionTarget(make_target("diag_a", 2, 1), make_target("const_b", 0, 0), d=2, eps0=0.05)
    cf = coefficient_field(build_local(t, 16, Window.cube(16, 1.0, 2)), Window.cube(16, 0.5, 2))
    assert np.allclose(cf.F, np.diag([2.1, 1.1]))


def test_off_diagonal_entry_recovered():
    t = DiffusionTarget(_const_a([[1.0, 0.2], [0.2, 1.0]]), make_target("const_b", 0, 0), d=2)
    cf = coefficient_field(build_local(t, 32, Window.cube(32, 0.5, 2)), Window.cube(32, 0.25, 2))
    assert np.allclose(cf.F[:, 0, 1], 0.2, rtol=0.05)
    assert np.allclose(cf.F[:, 1, 0], 0.2, rtol=0.05)


def test_non_dominant_a_rejected():
    t = DiffusionTarget(_const_a([[1.0, 1.2], [1.2, 2.0]]), make_target("const_b", 0, 0), d=2)
    with pytest.raises(ValueError, match="diagonally dominant"):
        build_local_symmetric(t, 8).weights_at(np.zeros((1, 2), dtype=np.int64))


def test_zero_drift_gives_zero_asym():
    t = DiffusionTarget(make_target("identity_a", 1), make_target("const_b", 0.0), d=1)
    dc = build_local(t, 16, Window.cube(16, 1.0, 1))
    assert np.all(dc.asym.weights_at(Window.cube(16, 1.0, 1).coords()) == 0)


def test_constant_drift_inside_cubes_and_zero_on_faces():
    n = 64
    t = DiffusionTarget(make_target("identity_a", 1), make_target("const_b", 1.0), d=1, beta_cell=0.5)
    dc = build_local(t, n, Window.cube(n, 1.0, 1))
    w = Window(n, (0,), (n - 1,))
    B = coefficient_field(dc, w).B[:, 0]
    part = CellPartition(n, 0.5)
    z = w.coords()
    inside = part.same_cube(z, z + 1)
    assert np.allclose(B[inside], 1.0)
    assert np.allclose(B[~inside], 0.0)


def test_local_builder_assumptions():
    n = 16
    t = DiffusionTarget(make_target("diag_a", 2, 1), make_target("const_b", 1, 0), d=2)
    w = Window.cube(n, 1.0, 2)
    dc = build_local(t, n, w)
    assert check_k2(dc, w, D=0.5).passed
    assert check_nnrw(dc, w).constants_found["eps"] > 0


def test_gradient_drift_linear_potential():
    n = 8
    cs = nearest_neighbor(n, 1)
    dc = build_gradient_drift(lambda X: X[:, 0], cs, n, eps=0.5)
    assert dc.asym.weight((0,), (1,)) == pytest.approx(-1 / 16)
    B = coefficient_field(dc, Window.cube(n, 0.5, 1)).B
    assert np.allclose(B, 1.0)


def test_gradient_drift_constant_and_clipping():
    n = 8
    cs = nearest_neighbor(n, 1)
    X = Window.cube(n, 1.0, 1).coords()
    const = build_gradient_drift(lambda Y: np.full(len(Y), 3.0), cs, n, eps=0.5)
    assert np.all(const.asym.weights_at(X) == 0)
    step = build_gradient_drift(lambda Y: np.where(Y[:, 0] > 0, 1.0, 0.0), cs, n, eps=0.5)
    assert step.asym.weight((0,), (1,)) == 0


def test_nonlocal_closed_form_cell():
    t = make_target("stable_K", 1.0)
    c = build_nonlocal(t, 4, 1.0, cell_scale=4.0)
    assert c.weight((0,), (3,)) == pytest.approx(4 * math.log(9 / 8), abs=1e-6)
    assert c.weight((0,), (1,)) == 0


def test_nonlocal_symmetric_kernel_has_zero_asym():
    c = build_nonlocal(make_target("stable_K", 1.5), 8, 1.0)
    assert decompose(c).asym.is_zero()


def test_nonlocal_exact_match_toy():
    t = JumpTarget(lambda W, Z: np.ones(len(np.atleast_2d(W))), alpha=1.0)
    c = build_nonlocal(t, 8, 4.0)
    res = verify_target_convergence({8: c}, t, ((0.0, 1.0), (2.0, 3.0)))
    assert res["integral"][0] == pytest.approx(1.0, rel=1e-9)


def test_nonlocal_discrepancy_on_separated_compact():
    t = make_target("stable_K", 1.0)
    c = build_nonlocal(t, 16, 4.0)
    res = verify_target_convergence({16: c}, t, ((0.0, 1.0), (2.0, 3.0)))
    oracle, _ = integrate.dblquad(lambda y, x: (y - x) ** -2.0, 0, 1, 2, 3, epsabs=1e-13, epsrel=1e-13)
    assert abs(res["integral"][0] - oracle) / oracle <= 0.02


def test_local_distances_decrease():
    t = DiffusionTarget(make_target("identity_a", 2), make_target("const_b", 1, 0), d=2)
    built = {n: build_local(t, n, Window(n, (-2, -2), (n + 2, n + 2))) for n in (8, 16)}
    res = verify_target_convergence(built, t, (0.0, 1.0))
    assert res["B_distance"][1] < res["B_distance"][0]
    assert res["F_distance"] == [0.0, 0.0]


def test_example_kernel_nonnegative_and_validated():
    dc = example_stable_conductance(8, 1.5, 0.5, 0.9)
    assert np.all(dc.full.weights_at(np.zeros((1, 1), dtype=np.int64)) >= 0)
    with pytest.raises(ValueError):
        example_stable_conductance(8, 1.5, 0.5, 1.2)


def test_unknown_registry_name():
    with pytest.raises(KeyError, match="unknown model"):
        make_target("no_such_model")
