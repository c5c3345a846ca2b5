"""Geometry of the scaled lattice n^-1 Z^d: points, finite windows and balls.

Points are stored as integer coordinate tuples plus the scale ``n``; the real
position is ``coords / n``.  Equality and hashing are therefore exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "LatticePoint",
    "Window",
    "Ball",
    "round_to_lattice",
    "ball_points",
    "ball_mask",
    "measure",
    "DEFAULT_SIGMA",
    "LatticeFunction",
]

#: minimum resolvable ball scale; radii r <= sigma / (2n) are skipped by checkers
DEFAULT_SIGMA = 1.0


@dataclass(frozen=True, order=True)
class LatticePoint:
    coords: tuple[int, ...]
    scale: int

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    @property
    def dim(self) -> int:
        return len(self.coords)

    def embed(self) -> np.ndarray:
        """Real position ``coords / n`` (exact for power-of-two scales)."""
        return np.asarray(self.coords, dtype=float) / self.scale

    def shift(self, h: Sequence[int]) -> "LatticePoint":
        return LatticePoint(tuple(c + int(s) for c, s in zip(self.coords, h)), self.scale)

    @classmethod
    def origin(cls, d: int, n: int) -> "LatticePoint":
        return cls((0,) * d, n)


def round_to_lattice(x: Sequence[float], n: int) -> LatticePoint:
    """Componentwise ``floor(n x_i)``, i.e. the map ``[x]_n``."""
    if n < 1:
        raise ValueError("scale must be >= 1")
    return LatticePoint(tuple(math.floor(n * float(xi)) for xi in x), n)


@dataclass(frozen=True)
class Window:
    """Axis-aligned inclusive box of integer coordinates ``lo..hi``.

    ``topology`` is ``"absorbing"`` (plain truncation) or ``"torus"`` (periodic
    wrap, used for exactly conservative generators).
    """

    scale: int
    lo: tuple[int, ...]
    hi: tuple[int, ...]
    topology: str = "absorbing"

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("window requires lo_i <= hi_i")
        if self.topology not in ("absorbing", "torus"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")

    @classmethod
    def cube(cls, n: int, radius: float, d: int, topology: str = "absorbing") -> "Window":
        """Window covering ``[-radius, radius]^d`` (real units)."""
        k = int(math.floor(radius * n + 1e-12))
        return cls(n, (-k,) * d, (k,) * d, topology)

    @classmethod
    def torus(cls, n: int, periods: int | Sequence[int], d: int = 1) -> "Window":
        """Torus with ``periods`` points per axis, coordinates ``0..periods-1``."""
        if isinstance(periods, int):
            periods = (periods,) * d
        return cls(n, (0,) * len(periods), tuple(p - 1 for p in periods), "torus")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_torus(self) -> bool:
        return self.topology == "torus"

    def coords(self) -> np.ndarray:
        """All points as an ``(N, d)`` integer array in C (lexicographic) order."""
        axes = [np.arange(a, b + 1, dtype=np.int64) for a, b in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Linear indices of integer coordinates; ``-1`` where outside.

        On a torus coordinates are wrapped first, so every input maps inside.
        """
        c = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        lo = np.asarray(self.lo, dtype=np.int64)
        shape = np.asarray(self.shape, dtype=np.int64)
        rel = c - lo
        if self.is_torus:
            rel = np.mod(rel, shape)
            inside = np.ones(len(c), dtype=bool)
        else:
            inside = np.all((rel >= 0) & (rel < shape), axis=1)
        idx = np.ravel_multi_index(tuple(np.where(inside[:, None], rel, 0).T), tuple(shape))
        return np.where(inside, idx, -1)

    def contains(self, p: LatticePoint) -> bool:
        if p.scale != self.scale:
            return False
        return all(a <= c <= b for c, a, b in zip(p.coords, self.lo, self.hi))

    def points(self) -> list[LatticePoint]:
        return [LatticePoint(tuple(row), self.scale) for row in self.coords()]

    def margin(self, p: LatticePoint) -> float:
        """Real distance from ``p`` to the nearest window face (inf on a torus)."""
        if self.is_torus:
            return math.inf
        m = min(min(c - a, b - c) for c, a, b in zip(p.coords, self.lo, self.hi))
        return m / self.scale


@dataclass(frozen=True)
class Ball:
    """Open ball ``{x : |x - center| < radius}``; ``closed=True`` uses ``<=``."""

    center: LatticePoint
    radius: float
    norm: str = "euclidean"
    closed: bool = False

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.norm not in ("euclidean", "sup"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def distance(self, coords: np.ndarray) -> np.ndarray:
        diff = (np.atleast_2d(coords) - np.asarray(self.center.coords)) / self.center.scale
        if self.norm == "sup":
            return np.max(np.abs(diff), axis=1)
        return np.sqrt(np.sum(diff * diff, axis=1))

    def contains_coords(self, coords: np.ndarray) -> np.ndarray:
        dist = self.distance(coords)
        # tolerance absorbs sqrt rounding for points exactly on the sphere
        eps = 1e-12 * max(1.0, self.radius)
        if self.closed:
            return dist <= self.radius + eps
        return dist < self.radius - eps

    def __contains__(self, p: LatticePoint) -> bool:
        return bool(self.contains_coords(np.asarray([p.coords]))[0])


def ball_mask(b: Ball, w: Window) -> np.ndarray:
    """Boolean mask over ``w.coords()`` selecting points of the ball."""
    return b.contains_coords(w.coords())


def ball_points(b: Ball, w: Window) -> list[LatticePoint]:
    """Window points strictly inside the ball, in lexicographic order."""
    if not w.contains(b.center):
        raise ValueError("ball center must lie in the window")
    coords = w.coords()
    sel = coords[b.contains_coords(coords)]
    return [LatticePoint(tuple(row), w.scale) for row in sel]


def measure(points: Iterable[LatticePoint], n: int | None = None) -> float:
    """Counting measure scaled by ``n^-d``."""
    pts = list(points)
    if not pts:
        return 0.0
    scales = {p.scale for p in pts}
    if len(scales) > 1 or (n is not None and scales != {n}):
        raise ValueError("scale mismatch")
    scale = scales.pop()
    d = pts[0].dim
    return len(pts) * float(scale) ** (-d)


class LatticeFunction:
    """Values of a real function on a finite set of lattice points.

    Parameters
    ----------
    coords : ndarray of int, shape (N, d)
        Integer coordinates of the support points.
    scale : int
        Lattice scale ``n``.
    values : array_like, shape (N,)
        Function values; an object array is allowed for exact arithmetic.
    """

    def __init__(self, coords, scale: int, values):
        self.coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        self.scale = int(scale)
        vals = np.asarray(values)
        if vals.dtype != object:
            vals = vals.astype(float)
            if not np.all(np.isfinite(vals)):
                raise ValueError("lattice function values must be finite")
        if vals.shape != (len(self.coords),):
            raise ValueError("values must have one entry per point")
        self.values = vals
        self._index = None

    @classmethod
    def on_window(cls, window: Window, values) -> "LatticeFunction":
        return cls(window.coords(), window.scale, values)

    @classmethod
    def from_callable(cls, window: Window, f) -> "LatticeFunction":
        """Evaluate ``f`` (vectorised over an ``(N, d)`` array of reals) at ``coords/n``."""
        X = window.coords()
        return cls(X, window.scale, np.asarray(f(X / window.scale), dtype=float).reshape(-1))

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def index(self) -> dict:
        if self._index is None:
            self._index = {tuple(c): i for i, c in enumerate(self.coords.tolist())}
        return self._index

    def __call__(self, coords, default=None):
        """Value at integer coordinates; ``default`` outside the support (error if None)."""
        i = self.index().get(tuple(int(v) for v in getattr(coords, "coords", coords)))
        if i is None:
            if default is None:
                raise KeyError(f"point {tuple(coords)} outside the support")
            return default
        return self.values[i]

    def contains(self, coords) -> bool:
        return tuple(int(v) for v in coords) in self.index()

    def norm2(self) -> float:
        """``L^2(mu_n)`` norm."""
        v = self.values.astype(float)
        return float(np.sqrt(np.sum(v * v) * float(self.scale) ** (-self.dim)))
