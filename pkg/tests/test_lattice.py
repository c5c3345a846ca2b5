import numpy as np
import pytest

from nonsym.lattice import (Ball, LatticeFunction, LatticePoint, Window, ball_points, measure,
                            round_to_lattice)


def test_round_to_lattice_floor():
    assert round_to_lattice((0.26, -0.01), 4).coords == (1, -1)
    assert round_to_lattice((0.25,), 4).coords == (1,)
    assert round_to_lattice((0.999,), 10).coords == (9,)


def test_round_to_lattice_rejects_bad_scale():
    with pytest.raises(ValueError):
        round_to_lattice((0.1,), 0)


def test_point_embedding_and_shift():
    p = LatticePoint((3, -2), 4)
    assert np.allclose(p.embed(), [0.75, -0.5])
    assert p.shift((1, 1)) == LatticePoint((4, -1), 4)


def test_ball_points_1d():
    w = Window.cube(4, 1.0, 1)
    pts = ball_points(Ball(LatticePoint.origin(1, 4), 0.3), w)
    assert [p.coords for p in pts] == [(-1,), (0,), (1,)]
    assert measure(pts) == 0.75


def test_ball_points_2d_euclidean():
    w = Window.cube(2, 2.0, 2)
    pts = ball_points(Ball(LatticePoint.origin(2, 2), 0.6), w)
    # brute force enumeration over the window
    X = w.coords()
    expect = [tuple(x) for x in X if np.hypot(*(x / 2)) < 0.6]
    assert sorted(p.coords for p in pts) == sorted(expect)
    assert len(pts) == 5
    assert measure(pts) == 1.25


def test_ball_volume_regularity():
    w = Window.cube(8, 2.0, 1)
    pts = ball_points(Ball(LatticePoint.origin(1, 8), 1.0), w)
    mass = measure(pts)
    assert mass == 15 / 8
    assert 1.0 <= mass <= 3.0


def test_ball_center_outside_window():
    w = Window.cube(4, 0.5, 1)
    with pytest.raises(ValueError):
        ball_points(Ball(LatticePoint((10,), 4), 0.3), w)


def test_ball_tiny_radius_is_empty_or_center():
    w = Window.cube(4, 1.0, 1)
    assert len(ball_points(Ball(LatticePoint.origin(1, 4), 0.1), w)) == 1


def test_measure_cases():
    assert measure([LatticePoint((k,), 4) for k in range(3)]) == 0.75
    assert measure([]) == 0
    pts = [LatticePoint((i, j), 2) for i in range(4) for j in range(4)]
    assert measure(pts) == 4
    with pytest.raises(ValueError, match="scale mismatch"):
        measure([LatticePoint((0,), 2), LatticePoint((0,), 4)])


def test_window_index_roundtrip_and_torus_wrap():
    w = Window.cube(4, 0.5, 2)
    X = w.coords()
    assert np.array_equal(w.index_of(X), np.arange(len(X)))
    assert w.index_of([[5, 0]])[0] == -1
    t = Window.torus(2, 4)
    assert t.index_of([[4], [-1]]).tolist() == [0, 3]


def test_window_validation():
    with pytest.raises(ValueError):
        Window(4, (1,), (0,))
    with pytest.raises(ValueError):
        Window(4, (0,), (1,), topology="sphere")


def test_lattice_function_lookup():
    w = Window.cube(4, 0.5, 1)
    f = LatticeFunction.from_callable(w, lambda X: X[:, 0] ** 2)
    assert f((1,)) == pytest.approx(1 / 16)
    assert f((9,), default=0.0) == 0.0
    with pytest.raises(KeyError):
        f((9,))
    with pytest.raises(ValueError):
        LatticeFunction(w.coords(), 4, [np.nan] * w.size)
