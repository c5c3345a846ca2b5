"""Shortest nearest-neighbour paths and the effective coefficients they induce.

For lattice points ``x, y`` a shortest nearest-neighbour path (SNNP) is a
monotone unit-step path from ``x`` to ``y``.  ``P^{x,y}(w, z)`` is the fraction
of such paths that traverse the directed unit edge ``(w, z)``.  All ratios are
computed with exact integer arithmetic.

With ``D_i^{x,y}(z) = P^{x,y}(z + e_i/n, z) - P^{x,y}(z, z + e_i/n)`` the
effective coefficients are

``F_ij(z) = sum_{x,y} n (x_i - y_i) D_j^{x,y}(z) C_s(x, y)`` and
``B_i(z) = n sum_{x,y} D_i^{x,y}(z) C_a(x, y)``,

which follow from summing ``G_ij(w, z)`` over ``w`` and ``H_i(x, z)`` over ``x``.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .conductance import DecomposedConductance
from .lattice import LatticeFunction, LatticePoint, Window

__all__ = [
    "DirectedEdge",
    "CoefficientField",
    "snnp_count",
    "snnp_edge_ratio",
    "edge_flux",
    "gradient_identity_check",
    "coefficient_field",
    "MAX_RANGE",
]

#: largest supported range bound (lattice units) for coefficient recovery
MAX_RANGE = 4


def _coords(p) -> tuple[int, ...]:
    return tuple(int(v) for v in getattr(p, "coords", p))


@dataclass(frozen=True)
class DirectedEdge:
    """Unit edge ``from -> to`` with ``to - from = orientation * e_axis / n``.

    ``axis`` is zero-based.
    """

    start: tuple[int, ...]
    axis: int
    orientation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "start", _coords(self.start))
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")
        if not 0 <= self.axis < len(self.start):
            raise ValueError("axis out of range")

    @property
    def end(self) -> tuple[int, ...]:
        e = list(self.start)
        e[self.axis] += self.orientation
        return tuple(e)

    @classmethod
    def between(cls, w, z) -> "DirectedEdge":
        w, z = _coords(w), _coords(z)
        diff = [b - a for a, b in zip(w, z)]
        nz = [i for i, v in enumerate(diff) if v != 0]
        if len(nz) != 1 or abs(diff[nz[0]]) != 1:
            raise ValueError("not a unit edge")
        return cls(w, nz[0], diff[nz[0]])


@lru_cache(maxsize=65536)
def _multinomial(delta: tuple[int, ...]) -> int:
    total = sum(abs(v) for v in delta)
    out = math.factorial(total)
    for v in delta:
        out //= math.factorial(abs(v))
    return out


def snnp_count(x, y) -> int:
    """Number of shortest nearest-neighbour paths from ``x`` to ``y``."""
    if hasattr(x, "scale") and hasattr(y, "scale") and x.scale != y.scale:
        raise ValueError("scale mismatch")
    return _multinomial(tuple(b - a for a, b in zip(_coords(x), _coords(y))))


def _compatible(x, y, w) -> bool:
    """``w`` lies in the monotone hull of ``x -> y`` (between them on every axis)."""
    for a, b, c in zip(x, y, w):
        lo, hi = (a, b) if a <= b else (b, a)
        if not lo <= c <= hi:
            return False
    return True


def snnp_edge_ratio(x, y, e: DirectedEdge) -> Fraction:
    """Exact fraction of SNNPs from ``x`` to ``y`` traversing ``e`` in its direction."""
    x, y = _coords(x), _coords(y)
    w, z = e.start, e.end
    step = y[e.axis] - x[e.axis]
    # the edge must point the way the path moves along its axis
    if step == 0 or (step > 0) != (e.orientation > 0):
        return Fraction(0)
    if not (_compatible(x, y, w) and _compatible(x, y, z)):
        return Fraction(0)
    total = snnp_count(x, y)
    used = snnp_count(x, w) * snnp_count(z, y)
    # a monotone path visits each hull point at most once, so the product counts
    # every path through (w, z) exactly once
    assert used <= total
    return Fraction(used, total)


@lru_cache(maxsize=4096)
def edge_flux(delta: tuple[int, ...]) -> dict:
    """``D_i(rho)`` tables for the path from ``0`` to ``delta``.

    Returns ``{(i, rho): D}`` with ``D = P(rho + e_i, rho) - P(rho, rho + e_i)``
    as an exact :class:`Fraction`, over every ``rho`` with a nonzero value.
    """
    d = len(delta)
    zero = (0,) * d
    out = {}
    ranges = [range(min(0, v) - 1, max(0, v) + 1) for v in delta]
    for rho in itertools.product(*ranges):
        for i in range(d):
            up = list(rho)
            up[i] += 1
            up = tuple(up)
            fwd = snnp_edge_ratio(zero, delta, DirectedEdge(rho, i, 1))
            bwd = snnp_edge_ratio(zero, delta, DirectedEdge(up, i, -1))
            val = bwd - fwd
            if val != 0:
                out[(i, rho)] = val
    return out


def gradient_identity_check(x, y, f: LatticeFunction, exact: bool = True):
    """Residuals of the discrete gradient identities along SNNPs.

    Checks
    ``f(x) - f(y) = (1/n) sum_i sum_z D_i(z) grad_i f(z)`` with
    ``grad_i f(z) = n (f(z + e_i/n) - f(z))``, the signed axis identity
    ``sum_z D_i(z) = n (x_i - y_i)`` and the unsigned companion
    ``sum_z (P(z + e_i/n, z) + P(z, z + e_i/n)) = |n (x_i - y_i)|``.

    Returns the maximum absolute residual (a Fraction when ``exact``).
    """
    x, y = _coords(x), _coords(y)
    d = len(x)
    n = f.scale
    lo = [min(a, b) for a, b in zip(x, y)]
    hi = [max(a, b) for a, b in zip(x, y)]
    for p in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
        if not f.contains(p):
            raise ValueError(f"lattice function does not cover the SNNP hull (missing {p})")
    conv = (lambda v: Fraction(v)) if exact else float
    delta = tuple(b - a for a, b in zip(x, y))
    flux = edge_flux(delta)
    rhs = Fraction(0) if exact else 0.0
    for (i, rho), D in flux.items():
        z = tuple(a + r for a, r in zip(x, rho))
        zi = list(z)
        zi[i] += 1
        grad = n * (conv(f(tuple(zi))) - conv(f(z)))
        rhs += (D if exact else float(D)) * grad / n
    res = abs(conv(f(x)) - conv(f(y)) - rhs)
    for i in range(d):
        signed = sum((D for (k, _), D in flux.items() if k == i), Fraction(0))
        res = max(res, abs(conv(signed) - conv(x[i] - y[i])))
        unsigned = Fraction(0)
        ranges = [range(min(0, v) - 1, max(0, v) + 1) for v in delta]
        zero = (0,) * d
        for rho in itertools.product(*ranges):
            up = list(rho)
            up[i] += 1
            unsigned += snnp_edge_ratio(zero, delta, DirectedEdge(rho, i, 1))
            unsigned += snnp_edge_ratio(zero, delta, DirectedEdge(tuple(up), i, -1))
        res = max(res, abs(conv(unsigned) - conv(abs(x[i] - y[i]))))
    return res if exact else float(res)


@dataclass
class CoefficientField:
    """Effective coefficients on a window: ``F`` of shape (N, d, d), ``B`` of shape (N, d)."""

    coords: np.ndarray
    scale: int
    F: np.ndarray
    B: np.ndarray

    def to_csv(self) -> str:
        d = self.coords.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = [f"z_{k + 1}" for k in range(d)]
        head += [f"F_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        head += [f"B_{i + 1}" for i in range(d)]
        w.writerow(head)
        for z, F, B in zip(self.coords, self.F, self.B):
            w.writerow([int(v) for v in z] + [repr(float(v)) for v in F.ravel()] + [repr(float(v)) for v in B])
        return buf.getvalue()

    def l1_distance(self, target_F=None, target_B=None, mask=None) -> tuple[float, float]:
        """``L^1(mu_n)`` distances to target arrays (or callables of real points)."""
        X = self.coords / self.scale
        sel = np.ones(len(X), bool) if mask is None else np.asarray(mask, bool)
        mu = float(self.scale) ** (-self.coords.shape[1])
        dF = dB = math.nan
        if target_F is not None:
            tF = target_F(X) if callable(target_F) else np.broadcast_to(target_F, self.F.shape)
            dF = float(np.abs(self.F - tF)[sel].sum() * mu)
        if target_B is not None:
            tB = target_B(X) if callable(target_B) else np.broadcast_to(target_B, self.B.shape)
            dB = float(np.abs(self.B - tB)[sel].sum() * mu)
        return dF, dB


def coefficient_field(dc: DecomposedConductance, window: Window) -> CoefficientField:
    """Exact-ratio summation of ``F_ij`` and ``B_i`` at every window point."""
    def bound(c):
        if c.range_bound is not None:
            return c.range_bound
        # stored kernels have finite support
        return c.reach() if c.kind != "function" else math.inf

    rb = max(bound(dc.sym), bound(dc.asym))
    if not math.isfinite(rb):
        raise ValueError("SNNP recovery requires bounded range")
    if rb > MAX_RANGE:
        raise ValueError(f"range bound {rb} exceeds supported maximum {MAX_RANGE}")
    n, d = dc.n, dc.d
    Z = window.coords()
    N = len(Z)
    F = np.zeros((N, d, d))
    B = np.zeros((N, d))
    for kernel, is_sym in ((dc.sym, True), (dc.asym, False)):
        for k, h in enumerate(kernel.offsets.tolist()):
            h = tuple(h)
            flux = edge_flux(h)
            for (j, rho), D in flux.items():
                # pairs (x, x + h) with x = z - rho contribute at z
                X = Z - np.asarray(rho, dtype=np.int64)
                w = kernel.weights_at(X)[:, k]
                if not np.any(w):
                    continue
                if is_sym:
                    for i in range(d):
                        if h[i]:
                            F[:, i, j] += (-h[i]) * float(D) * w
                else:
                    B[:, j] += n * float(D) * w
    return CoefficientField(Z, n, F, B)
