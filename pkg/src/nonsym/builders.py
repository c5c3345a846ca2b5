"""Conductance constructions from target models.

* :func:`build_local_symmetric` and :func:`build_local_antisymmetric` realise a
  diffusion with drift, ``div(a grad u) - 2 b . grad u``, through cell-averaged
  coefficients on cubes of side ``r_n = floor(n^(1-beta))/n``.
* :func:`build_gradient_drift` handles ``b = grad V`` directly.
* :func:`build_nonlocal` averages a jump kernel ``K`` over lattice cells.
* :func:`example_stable_conductance` and :func:`example_potential_conductance`
  are the two explicit heavy-tailed families with power-type antisymmetric parts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .conductance import Conductance, DecomposedConductance, check_nnrw, combine
from .lattice import Window

__all__ = [
    "DiffusionTarget",
    "JumpTarget",
    "CellPartition",
    "cell_average",
    "build_local_symmetric",
    "build_local_antisymmetric",
    "build_local",
    "build_gradient_drift",
    "build_nonlocal",
    "example_stable_conductance",
    "example_potential_conductance",
    "verify_target_convergence",
    "QuadratureError",
    "REGISTRY",
    "make_target",
]


class QuadratureError(RuntimeError):
    pass


# ====================================================================== targets
@dataclass
class DiffusionTarget:
    """Diffusion data: vectorised ``a(X) -> (N, d, d)`` and ``b(X) -> (N, d)``.

    ``eps0`` is the nearest-neighbour floor added by the symmetric scheme; it
    shifts the recovered diffusion matrix by ``2 eps0 I``.
    """

    a: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    d: int
    theta: float = math.inf
    beta_cell: float = 0.5
    eps0: float = 0.05
    quad_points: int = 4
    name: str = ""

    def __post_init__(self):
        if not 0 < self.beta_cell < 1:
            raise ValueError("beta_cell must lie in (0, 1)")
        if not self.theta > self.d / 2:
            raise ValueError("theta must exceed d/2")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")

    def ellipticity(self, samples: np.ndarray) -> tuple[float, float]:
        """Smallest and largest eigenvalue of ``a`` over sample points (symmetry checked)."""
        A = np.asarray(self.a(np.atleast_2d(samples)), dtype=float)
        if not np.allclose(A, np.swapaxes(A, 1, 2)):
            raise ValueError("a must be symmetric")
        ev = np.linalg.eigvalsh(A)
        return float(ev.min()), float(ev.max())


@dataclass
class JumpTarget:
    """Jump data: vectorised kernel ``K(W, Z) -> (N,)`` on pairs of real points.

    ``translation_invariant`` kernels depend on ``z - w`` only and are stored
    as displacement tables.
    """

    K: Callable[[np.ndarray, np.ndarray], np.ndarray]
    alpha: float
    d: int = 1
    Lambda: float = 1.0
    theta: float = math.inf
    quad_points: int = 4
    translation_invariant: bool = True
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")

    def comparability(self, h: np.ndarray) -> tuple[float, float]:
        """Range of ``K(0, h) |h|^(d+alpha)`` over sample displacements."""
        h = np.atleast_2d(h)
        vals = self.K(np.zeros_like(h), h) * np.linalg.norm(h, axis=1) ** (self.d + self.alpha)
        return float(vals.min()), float(vals.max())


# ====================================================================== cells
@dataclass(frozen=True)
class CellPartition:
    """Cubes ``Q(x0, r_n)`` with ``r_n = floor(n^(1-beta))/n`` anchored on ``r_n Z^d``."""

    n: int
    beta: float

    @property
    def m(self) -> int:
        """Cube side in lattice units, ``floor(n^(1-beta))``."""
        return max(1, int(math.floor(self.n ** (1.0 - self.beta) * (1 + 1e-12))))

    @property
    def r_n(self) -> Fraction:
        return Fraction(self.m, self.n)

    def anchor(self, coords: np.ndarray) -> np.ndarray:
        """Integer anchor (lattice units) of the cube holding each point."""
        return np.floor_divide(np.asarray(coords, dtype=np.int64), self.m) * self.m

    def same_cube(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.all(self.anchor(X) == self.anchor(Y), axis=1)

    def count_in(self, lo: float, hi: float) -> int:
        """Number of anchors in ``[lo, hi)`` along one axis (real units)."""
        r = float(self.r_n)
        return int(math.ceil(hi / r - 1e-12) - math.ceil(lo / r - 1e-12))


def _midpoint_nodes(q: int) -> np.ndarray:
    return (np.arange(q) + 0.5) / q


def cell_average(f: Callable[[np.ndarray], np.ndarray], part: CellPartition,
                 coords: np.ndarray, quad_points: int = 4, _cache: dict | None = None) -> np.ndarray:
    """Mean of ``f`` over the cube of each point (tensor midpoint rule).

    ``f`` maps an ``(M, d)`` array of real points to ``(M, ...)`` values; the
    result has shape ``(N, ...)`` and is constant on every cube.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    d = coords.shape[1]
    anchors = part.anchor(coords)
    uniq, inv = np.unique(anchors, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    t = _midpoint_nodes(quad_points)
    grid = np.stack(np.meshgrid(*([t] * d), indexing="ij"), axis=-1).reshape(-1, d)
    side = part.m / part.n
    pts = (uniq[:, None, :] / part.n + side * grid[None, :, :]).reshape(-1, d)
    vals = np.asarray(f(pts), dtype=float)
    vals = vals.reshape((len(uniq), len(grid)) + vals.shape[1:]).mean(axis=1)
    return vals[inv]


# ====================================================================== local builders
def _local_offsets(d: int) -> list[tuple[int, ...]]:
    offs = []
    for i in range(d):
        for s in (1, -1):
            h = [0] * d
            h[i] = s
            offs.append(tuple(h))
    for i in range(d):
        for j in range(i + 1, d):
            for si in (1, -1):
                for sj in (1, -1):
                    h = [0] * d
                    h[i] = si
                    h[j] = sj
                    offs.append(tuple(h))
    return offs


def build_local_symmetric(t: DiffusionTarget, n: int, window: Window | None = None) -> Conductance:
    """Symmetric range-2 conductance whose effective matrix is ``a + 2 eps0 I``.

    Axis edges carry ``(a_ii - sum_{j != i} |a_ij|)/2 + eps0`` and the diagonal
    edges ``x -> x + e_i + s e_j`` carry ``max(s a_ij, 0)/2``; the coefficients
    are cell averages taken in the cube of the pair midpoint, so the weights
    are exactly symmetric.
    """
    d = t.d
    part = CellPartition(n, t.beta_cell)
    offs = _local_offsets(d)
    offs_arr = np.asarray(offs, dtype=np.int64)
    def fn(X):
        X = np.asarray(X, dtype=np.int64)
        out = np.zeros((len(X), len(offs)))
        for k, h in enumerate(offs_arr):
            mid = np.floor_divide(2 * X + h, 2)
            A = cell_average(t.a, part, mid, t.quad_points)
            nz = np.nonzero(h)[0]
            if len(nz) == 1:
                i = nz[0]
                off = np.abs(A[:, i, :]).sum(axis=1) - np.abs(A[:, i, i])
                margin = A[:, i, i] - off
                if np.any(margin <= 0):
                    raise ValueError("scheme requires diagonally dominant a; widen eps0 or reject")
                out[:, k] = 0.5 * margin + t.eps0
            else:
                i, j = nz
                s = h[i] * h[j]
                out[:, k] = 0.5 * np.maximum(s * A[:, i, j], 0.0)
        return out

    return Conductance.from_function(n, 2.0, offs, fn, d=d, range_bound=2.0, name="local_sym")


def _unit_offsets(d: int) -> list[tuple[int, ...]]:
    return _local_offsets(d)[: 2 * d]


def _nn_floor(cs: Conductance, window: Window) -> float:
    from .conductance import DecomposedConductance as _DC
    zero = Conductance.from_table(cs.n, cs.alpha, {}, d=cs.d, signed=True)
    rep = check_nnrw(_DC(cs, zero, full=cs), window)
    return rep.constants_found["eps"]


def build_local_antisymmetric(t: DiffusionTarget, cs: Conductance, n: int,
                              window: Window | None = None, eps: float | None = None
                              ) -> DecomposedConductance:
    """Nearest-neighbour antisymmetric part realising the drift ``b``.

    ``C_a(x, y) = beta(x, y) NN(x, y) 1{|beta| <= eps}`` with ``NN = 1/2`` on unit
    edges and ``beta(x, x + e_i/n) = -b_i(x)/n`` inside one cube (zero across
    cube faces).  ``eps`` defaults to the nearest-neighbour floor of ``cs`` on
    ``window``, which gives ``C >= C_s / 2`` edgewise.
    """
    d = t.d
    if eps is None:
        if window is None:
            raise ValueError("either eps or a window to measure the floor is required")
        eps = _nn_floor(cs, window)
    part = CellPartition(n, t.beta_cell)
    offs = _unit_offsets(d)
    offs_arr = np.asarray(offs, dtype=np.int64)

    def fn(X):
        X = np.asarray(X, dtype=np.int64)
        bn = cell_average(t.b, part, X, t.quad_points)
        out = np.zeros((len(X), len(offs)))
        for k, h in enumerate(offs_arr):
            i = int(np.nonzero(h)[0][0])
            same = part.same_cube(X, X + h)
            beta = -h[i] * bn[:, i] / n
            keep = same & (np.abs(beta) <= eps)
            out[:, k] = np.where(keep, 0.5 * beta, 0.0)
        return out

    ca = Conductance.from_function(n, 2.0, offs, fn, d=d, range_bound=1.0, signed=True, name="local_asym")
    full = combine(cs, ca, 1, 1, signed=False)
    dc = DecomposedConductance(cs, ca, full=full)
    dc.eps = eps
    return dc


def build_local(t: DiffusionTarget, n: int, window: Window, eps: float | None = None) -> DecomposedConductance:
    """Symmetric and antisymmetric parts of the local construction in one call."""
    cs = build_local_symmetric(t, n, window)
    return build_local_antisymmetric(t, cs, n, window, eps)


def build_gradient_drift(V: Callable[[np.ndarray], np.ndarray], cs: Conductance, n: int,
                         window: Window | None = None, eps: float | None = None
                         ) -> DecomposedConductance:
    """``C_a(x, y) = (V(x) - V(y)) NN(x, y) 1{|V(x) - V(y)| <= eps}``.

    ``V`` is vectorised over ``(N, d)`` real points.
    """
    d = cs.d
    if eps is None:
        if window is None:
            raise ValueError("either eps or a window to measure the floor is required")
        eps = _nn_floor(cs, window)
    offs = _unit_offsets(d)
    offs_arr = np.asarray(offs, dtype=np.int64)

    def fn(X):
        X = np.asarray(X, dtype=np.int64)
        vx = np.asarray(V(X / n), dtype=float).reshape(-1)
        out = np.zeros((len(X), len(offs)))
        for k, h in enumerate(offs_arr):
            dv = vx - np.asarray(V((X + h) / n), dtype=float).reshape(-1)
            out[:, k] = np.where(np.abs(dv) <= eps, 0.5 * dv, 0.0)
        return out

    ca = Conductance.from_function(n, 2.0, offs, fn, d=d, range_bound=1.0, signed=True, name="grad_asym")
    dc = DecomposedConductance(cs, ca, full=combine(cs, ca, 1, 1, signed=False))
    dc.eps = eps
    return dc


# ====================================================================== nonlocal builder
def _gauss_box(q: int, d: int):
    """Gauss-Legendre nodes/weights on the unit cube ``[-1/2, 1/2]^d``."""
    x, w = np.polynomial.legendre.leggauss(q)
    x = x / 2
    w = w / 2
    grids = np.meshgrid(*([x] * d), indexing="ij")
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return nodes, weights


def _cell_integrals(K, Xc: np.ndarray, Yc: np.ndarray, n: int, q: int) -> np.ndarray:
    """``int int K(w, z) dw dz`` over sup-norm cells of side ``1/n`` around rows of ``Xc``/``Yc`` (real)."""
    d = Xc.shape[1]
    nodes, weights = _gauss_box(q, d)
    vol = float(n) ** (-d)
    out = np.zeros(len(Xc))
    # loop over the w-nodes, vectorise over pairs and z-nodes
    for a, wa in zip(nodes, weights):
        W = Xc + a / n
        Wr = np.repeat(W, len(nodes), axis=0)
        Z = (Yc[:, None, :] + nodes[None, :, :] / n).reshape(-1, d)
        vals = np.asarray(K(Wr, Z), dtype=float).reshape(len(Xc), len(nodes))
        out += wa * (vals @ weights)
    return out * vol * vol


def _adaptive_cell_integrals(K, Xc, Yc, n, q0, rtol, qmax=64):
    q = q0
    prev = _cell_integrals(K, Xc, Yc, n, q)
    while True:
        q2 = 2 * q
        cur = _cell_integrals(K, Xc, Yc, n, q2)
        rel = np.abs(cur - prev) / np.maximum(np.abs(cur), 1e-300)
        if np.all(rel <= rtol):
            return cur
        if q2 >= qmax:
            i = int(np.argmax(rel))
            raise QuadratureError(
                f"cell quadrature did not converge for pair x={Xc[i].tolist()} y={Yc[i].tolist()}: "
                f"relative change {rel[i]:.3g}")
        q, prev = q2, cur


def build_nonlocal(t: JumpTarget, n: int, range_cut: float, *, cell_scale: float = 1.0,
                   rtol: float = 1e-2, window: Window | None = None) -> Conductance:
    """Cell-averaged jump kernel.

    ``C(x, y) = cell_scale * n^(d - alpha) * int_{cell(x)} int_{cell(y)} K``
    over sup-norm cells of side ``1/n``, for ``|x - y|_inf >= 2/n`` and
    ``|x - y| <= range_cut``.  With ``cell_scale = 1`` one has
    ``n^(d+alpha) C -> K``; ``cell_scale = 4**d`` is the alternative
    normalisation with a factor ``4^d``.

    Quadrature is tensor Gauss-Legendre of order ``t.quad_points`` (order 8
    for pairs with ``|x - y|_inf <= 4/n``), doubled until successive orders
    agree to ``rtol``.  The rate of the dropped tail beyond ``range_cut`` is
    estimated and stored in ``meta['dropped_tail_rate']``.
    """
    d, alpha = t.d, t.alpha
    if range_cut < 2.0 / n:
        raise ValueError("range_cut must be at least 2/n")
    if t.quad_points < 2:
        raise ValueError("quadrature order must be >= 2")
    R = int(math.floor(range_cut * n + 1e-9))
    grid = np.stack(np.meshgrid(*([np.arange(-R, R + 1)] * d), indexing="ij"), -1).reshape(-1, d)
    supn = np.abs(grid).max(axis=1)
    keep = (supn >= 2) & (np.sqrt((grid.astype(float) ** 2).sum(axis=1)) <= range_cut * n + 1e-9)
    offs = grid[keep]
    near = np.abs(offs).max(axis=1) <= 4
    pref = cell_scale * float(n) ** (d - alpha)

    def integrate(Xc, Yc, nearmask, K=t.K):
        out = np.zeros(len(Xc))
        for mask, q0 in ((nearmask, max(8, t.quad_points)), (~nearmask, t.quad_points)):
            if mask.any():
                out[mask] = _adaptive_cell_integrals(K, Xc[mask], Yc[mask], n, q0, rtol)
        return pref * out

    if t.translation_invariant:
        # C(0, -h) is the integral of the reflected kernel over the cells of (0, h); using the
        # same nodes for both keeps symmetric kernels exactly symmetric
        lead = offs[np.arange(len(offs)), np.argmax(offs != 0, axis=1)]
        pos = offs[lead > 0]
        pnear = np.abs(pos).max(axis=1) <= 4
        zero = np.zeros((len(pos), d))
        fwd = integrate(zero, pos / n, pnear)
        bwd = integrate(zero, pos / n, pnear, K=lambda W, Z: t.K(-W, -Z))
        table = {}
        for h, a, b in zip(pos, fwd, bwd):
            table[tuple(int(v) for v in h)] = float(a)
            table[tuple(-int(v) for v in h)] = float(b)
        c = Conductance.from_table(n, alpha, table, d=d, name="nonlocal")
    else:
        def fn(X, offs=offs, near=near):
            X = np.asarray(X, dtype=np.int64)
            N, m = len(X), len(offs)
            Xc = np.repeat(X / n, m, axis=0)
            Yc = (X[:, None, :] + offs[None, :, :]).reshape(-1, d) / n
            return integrate(Xc, Yc, np.tile(near, N)).reshape(N, m)

        c = Conductance.from_function(n, alpha, offs, fn, d=d, name="nonlocal")
    c.meta = {"range_cut": range_cut, "cell_scale": cell_scale,
              "dropped_tail_rate": _tail_estimate(t, n, range_cut, cell_scale)}
    return c


def _tail_estimate(t: JumpTarget, n: int, range_cut: float, cell_scale: float) -> float:
    """Estimate ``n^alpha sum_{|h| > range_cut} C(0, h)`` from two dyadic shells."""
    d = t.d
    shells = []
    for k in range(2):
        lo, hi = range_cut * 2 ** k, range_cut * 2 ** (k + 1)
        r = np.linspace(lo, hi, 257)[:-1] + (hi - lo) / 512
        if d == 1:
            h = np.concatenate([r, -r])[:, None]
            dh = np.full(len(h), (hi - lo) / 256)
        else:
            ang = np.linspace(0, 2 * np.pi, 65)[:-1]
            if d != 2:
                return math.nan
            rr, aa = np.meshgrid(r, ang, indexing="ij")
            h = np.stack([(rr * np.cos(aa)).ravel(), (rr * np.sin(aa)).ravel()], 1)
            dh = (rr * (hi - lo) / 256 * (2 * np.pi / 64)).ravel()
        vals = t.K(np.zeros_like(h), h)
        shells.append(float(np.sum(vals * dh)))
    s0, s1 = shells
    scale = cell_scale
    if s0 <= 0:
        return 0.0
    ratio = s1 / s0
    total = s0 / (1 - ratio) if 0 <= ratio < 1 else math.inf
    return scale * total


# ====================================================================== explicit heavy-tailed families
def example_stable_conductance(n: int, alpha: float, beta: float, gamma: float, M1: float = 1.0,
                               M2: float = 0.5, d: int = 1, range_cut: float = 4.0,
                               clip: bool = True) -> DecomposedConductance:
    """Heavy-tailed kernel with a power-type antisymmetric part.

    ``C_s(h) = M1 |k|^(-d-alpha)`` and
    ``C_a(h) = M2 sgn(k_1) n^(-d-alpha) (|h|^(-d-beta) 1{|h|<=1} + |h|^(-d-gamma) 1{|h|>1})``
    with ``k = n h`` the lattice displacement.  Requires
    ``0 < 2 beta < alpha < 2 gamma < 2``.  ``clip`` enforces ``|C_a| <= C_s``,
    which keeps ``C >= 0`` where ``gamma < alpha`` would break it.
    """
    if not (0 < 2 * beta < alpha < 2 * gamma < 2):
        raise ValueError("need 0 < 2 beta < alpha < 2 gamma < 2")
    R = int(math.floor(range_cut * n + 1e-9))
    grid = np.stack(np.meshgrid(*([np.arange(-R, R + 1)] * d), indexing="ij"), -1).reshape(-1, d)
    k = np.sqrt((grid.astype(float) ** 2).sum(axis=1))
    ok = (k > 0) & (k <= R + 1e-9)
    grid, k = grid[ok], k[ok]
    h = k / n
    cs = M1 * k ** (-d - alpha)
    sgn = np.sign(grid[:, 0]).astype(float)
    # points with zero first coordinate get the sign of the first nonzero coordinate
    for c in range(1, d):
        z = sgn == 0
        sgn[z] = np.sign(grid[z, c])
    ca = M2 * sgn * float(n) ** (-d - alpha) * np.where(h <= 1, h ** (-d - beta), h ** (-d - gamma))
    if clip:
        ca = np.clip(ca, -cs, cs)
    sym = {tuple(int(v) for v in g): float(w) for g, w in zip(grid, cs)}
    asym = {tuple(int(v) for v in g): float(w) for g, w in zip(grid, ca)}
    S = Conductance.from_table(n, alpha, sym, d=d, name="example_sym")
    A = Conductance.from_table(n, alpha, asym, d=d, signed=True, name="example_asym")
    full = Conductance.from_table(n, alpha, {g: sym[g] + asym[g] for g in sym}, d=d, name="example")
    return DecomposedConductance(S, A, full=full)


def example_potential_conductance(n: int, alpha: float, V: Callable[[np.ndarray], np.ndarray],
                                  g: float = 1.0, d: int = 1, range_cut: float = 4.0
                                  ) -> DecomposedConductance:
    """``C_s = g |k|^(-d-alpha)`` and ``C_a = (V(x) - V(y)) |k|^(-d-alpha) 1{|x-y| <= 1}``.

    ``V`` must satisfy ``|V(x) - V(y)| <= g`` so that ``C >= 0``.
    """
    R = int(math.floor(range_cut * n + 1e-9))
    grid = np.stack(np.meshgrid(*([np.arange(-R, R + 1)] * d), indexing="ij"), -1).reshape(-1, d)
    k = np.sqrt((grid.astype(float) ** 2).sum(axis=1))
    ok = (k > 0) & (k <= R + 1e-9)
    grid, k = grid[ok], k[ok]
    base = k ** (-d - alpha)
    local = (k / n) <= 1 + 1e-12
    sym = {tuple(int(v) for v in gg): float(g * w) for gg, w in zip(grid, base)}
    S = Conductance.from_table(n, alpha, sym, d=d, name="potential_sym")

    def fn(X):
        X = np.asarray(X, dtype=np.int64)
        vx = np.asarray(V(X / n), dtype=float).reshape(-1, 1)
        vy = np.stack([np.asarray(V((X + h) / n), dtype=float).reshape(-1) for h in grid], axis=1)
        return (vx - vy) * np.where(local, base, 0.0)[None, :]

    A = Conductance.from_function(n, alpha, grid, fn, d=d, signed=True, name="potential_asym")
    return DecomposedConductance(S, A, full=combine(S, A, 1, 1, signed=False))


# ====================================================================== convergence to targets
def verify_target_convergence(built: dict, target, K_compact, *, f=None, quad_points: int = 8) -> dict:
    """Distances of built families to their targets along the ``n`` grid.

    Parameters
    ----------
    built : dict
        ``{n: DecomposedConductance}`` (local targets) or ``{n: Conductance}``
        (jump targets).
    target : DiffusionTarget or JumpTarget
    K_compact : Window-like or tuple
        Local branch: a callable ``n -> Window`` or a pair ``(lo, hi)`` of real
        corners of the cube ``K``.  Nonlocal branch (d = 1): ``((x0, x1), (y0, y1))``.
    f : callable, optional
        Test function ``f(x, y)`` for the nonlocal branch (default ``1``).
    """
    from .snnp import coefficient_field

    ns = sorted(built)
    out = {"n": ns}
    if isinstance(target, DiffusionTarget):
        dF, dB = [], []
        lo, hi = K_compact
        d = target.d
        for n in ns:
            w = Window(n, tuple(int(math.ceil(v * n)) for v in np.broadcast_to(lo, d)),
                       tuple(int(math.ceil(v * n)) - 1 for v in np.broadcast_to(hi, d)))
            cf = coefficient_field(built[n], w)
            shift = 2 * target.eps0 * np.eye(d)
            a_tgt = lambda X: np.asarray(target.a(X)) + shift
            fF, fB = cf.l1_distance(a_tgt, target.b)
            dF.append(fF)
            dB.append(fB)
        out["F_distance"] = dF
        out["B_distance"] = dB
        out["F_rate"] = _loglog_rate(ns, dF)
        out["B_rate"] = _loglog_rate(ns, dB)
        return out
    if target.d != 1:
        raise NotImplementedError("nonlocal discrepancy is implemented for d = 1")
    (x0, x1), (y0, y1) = K_compact
    if f is None:
        f = lambda x, y: np.ones_like(x)
    gx, gw = np.polynomial.legendre.leggauss(quad_points)
    disc = []
    for n in ns:
        c = built[n]
        total = 0.0
        kx = np.arange(math.floor(x0 * n), math.ceil(x1 * n))
        ky = np.arange(math.floor(y0 * n), math.ceil(y1 * n))
        for a in kx:
            xa, xb = max(a / n, x0), min((a + 1) / n, x1)
            if xb <= xa:
                continue
            for b in ky:
                ya, yb = max(b / n, y0), min((b + 1) / n, y1)
                if yb <= ya:
                    continue
                cval = c.weight((int(a),), (int(b),))
                if cval == 0:
                    continue
                X = (xa + xb) / 2 + (xb - xa) / 2 * gx
                Y = (ya + yb) / 2 + (yb - ya) / 2 * gx
                XX, YY = np.meshgrid(X, Y, indexing="ij")
                integ = np.einsum("i,j,ij->", gw, gw, f(XX, YY)) * (xb - xa) * (yb - ya) / 4
                total += integ * cval
        disc.append(total * float(n) ** (1 + target.alpha))
    out["integral"] = disc
    return out


def _loglog_rate(ns, vals) -> float:
    v = np.asarray(vals, dtype=float)
    ok = v > 0
    if ok.sum() < 2:
        return math.inf if np.all(v == 0) else math.nan
    return float(-np.polyfit(np.log(np.asarray(ns)[ok]), np.log(v[ok]), 1)[0])


# ====================================================================== registry
def _identity_a(d: int = 1):
    return lambda X: np.broadcast_to(np.eye(d), (len(X), d, d)).copy()


def _diag_a(*v):
    D = np.diag(np.asarray(v, dtype=float))
    return lambda X: np.broadcast_to(D, (len(X),) + D.shape).copy()


def _matrix_a(rows):
    A = np.asarray(rows, dtype=float)
    if not np.allclose(A, A.T):
        raise ValueError("a must be symmetric")
    return lambda X: np.broadcast_to(A, (len(X),) + A.shape).copy()


def _const_b(*v):
    b = np.asarray(v, dtype=float)
    return lambda X: np.broadcast_to(b, (len(X), len(b))).copy()


def _grad_V(kind: str = "sin", amplitude: float = 0.25):
    """Return ``(V, grad V)`` as vectorised callables."""
    if kind == "sin":
        def V(X):
            return amplitude * np.sin(2 * np.pi * X).sum(axis=1)

        def gV(X):
            return amplitude * 2 * np.pi * np.cos(2 * np.pi * X)
    elif kind == "gaussian":
        def V(X):
            return amplitude * np.exp(-(X ** 2).sum(axis=1))

        def gV(X):
            return -2 * X * V(X)[:, None]
    else:
        raise ValueError(f"unknown potential {kind!r}")
    return V, gV


def _stable_K(alpha: float, c: float = 1.0, d: int = 1, **kw) -> JumpTarget:
    def K(W, Z):
        r = np.sqrt(((Z - W) ** 2).sum(axis=1))
        return c * r ** (-d - alpha)

    return JumpTarget(K, alpha, d=d, Lambda=max(c, 1 / c), name="stable_K",
                      params={"alpha": alpha, "c": c}, **kw)


def _nonsym_stable_K(alpha: float, beta: float, gamma: float, M1: float = 1.0, M2: float = 0.5,
                     d: int = 1, **kw) -> JumpTarget:
    if not (0 < 2 * beta < alpha < 2 * gamma < 2):
        raise ValueError("need 0 < 2 beta < alpha < 2 gamma < 2")

    def K(W, Z):
        H = Z - W
        r = np.sqrt((H ** 2).sum(axis=1))
        ks = M1 * r ** (-d - alpha)
        ka = M2 * np.sign(H[:, 0]) * np.where(r <= 1, r ** (-d - beta), r ** (-d - gamma))
        return ks + np.clip(ka, -ks, ks)

    return JumpTarget(K, alpha, d=d, Lambda=max(2 * M1, 1 / M1), name="nonsym_stable_K",
                      params={"alpha": alpha, "beta": beta, "gamma": gamma, "M1": M1, "M2": M2}, **kw)


REGISTRY = {
    "identity_a": _identity_a,
    "diag_a": _diag_a,
    "matrix_a": _matrix_a,
    "const_b": _const_b,
    "grad_V": _grad_V,
    "stable_K": _stable_K,
    "nonsym_stable_K": _nonsym_stable_K,
}


def make_target(name: str, *args, **kwargs):
    """Look up a built-in target by registry name."""
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(*args, **kwargs)
