"""Conductance families on n^-1 Z^d, their decomposition and assumption checkers.

A :class:`Conductance` is a directed weight ``C(x, y)`` stored through a finite
list of integer displacements ``h = n (y - x)``.  Three storage kinds exist:

``table``
    translation invariant, ``C(x, x + h/n) = table[h]``;
``edges``
    an explicit sparse map ``(x, y) -> weight`` (integer coordinates);
``function``
    a vectorised callback ``fn(X) -> (N, m)`` giving the weights of every
    point of ``X`` towards each displacement.

Table and edge storage accept :class:`fractions.Fraction` weights, in which
case decomposition and reconstruction are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .lattice import DEFAULT_SIGMA, Ball, Window

__all__ = [
    "Conductance",
    "DecomposedConductance",
    "AssumptionReport",
    "decompose",
    "total_rate",
    "check_ctail",
    "check_k1",
    "check_k2",
    "check_nnrw",
    "second_moment",
    "check_poinc_sampled",
    "nearest_neighbor",
    "lp_norm",
]

Offset = tuple[int, ...]


def _as_offsets(offsets) -> np.ndarray:
    arr = np.asarray(offsets, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


class Conductance:
    """Directed edge weights ``C(x, y)`` on the scaled lattice.

    Use the constructors :meth:`from_table`, :meth:`from_edges` and
    :meth:`from_function` rather than ``__init__``.

    Parameters
    ----------
    n : int
        Lattice scale.
    alpha : float
        Scaling exponent in ``(0, 2]``.
    d : int
        Dimension.
    offsets : array_like of int, shape (m, d)
        Displacements (lattice units) that may carry weight.
    range_bound : float, optional
        Declared bounded range ``C``: weights vanish when ``|x - y| > C/n``.
    signed : bool
        Allow negative weights (used for antisymmetric parts).
    """

    def __init__(self, n: int, alpha: float, d: int, offsets, *, kind: str,
                 table=None, edges=None, fn=None, range_bound=None,
                 signed: bool = False, name: str = ""):
        if n < 1:
            raise ValueError("scale must be >= 1")
        if not 0 < alpha <= 2:
            raise ValueError("alpha must lie in (0, 2]")
        self.n = int(n)
        self.alpha = float(alpha)
        self.d = int(d)
        self.offsets = _as_offsets(offsets).reshape(-1, self.d) if len(offsets) else np.zeros((0, d), np.int64)
        self.kind = kind
        self.table = table
        self.edges = edges
        self.fn = fn
        self.range_bound = range_bound
        self.signed = signed
        self.name = name
        self._off_index = {tuple(int(v) for v in h): k for k, h in enumerate(self.offsets)}
        if any(not any(h) for h in self._off_index):
            raise ValueError("C(x, x) must vanish: zero displacement not allowed")
        if range_bound is not None and len(self.offsets):
            far = np.sqrt((self.offsets ** 2).sum(axis=1)) > range_bound + 1e-12
            if kind in ("table", "edges") and far.any():
                bad = [tuple(h) for h, f in zip(self.offsets.tolist(), far) if f]
                weights = self._stored_offset_weights()
                if any(weights.get(b, 0) != 0 for b in bad):
                    raise ValueError("edge exceeds declared range_bound")
        if kind == "table":
            self._table_vals = np.array([float(table[tuple(h)]) for h in self.offsets.tolist()])

    # ------------------------------------------------------------------ constructors
    @classmethod
    def from_table(cls, n, alpha, table: dict, *, d=None, range_bound=None,
                   signed=False, name="") -> "Conductance":
        """Translation-invariant conductance from a displacement table."""
        table = {tuple(int(v) for v in np.atleast_1d(h)): w for h, w in table.items()}
        if d is None:
            d = len(next(iter(table))) if table else 1
        for h, w in table.items():
            if not any(h) and w != 0:
                raise ValueError("C(x, x) must vanish")
            if not signed and w < 0:
                raise ValueError(f"negative weight {w} at displacement {h}")
        table = {h: w for h, w in table.items() if any(h)}
        offsets = sorted(table)
        return cls(n, alpha, d, offsets, kind="table", table=table,
                   range_bound=range_bound, signed=signed, name=name)

    @classmethod
    def from_edges(cls, n, alpha, edges: dict, *, d=None, range_bound=None,
                   signed=False, name="") -> "Conductance":
        """Explicit sparse conductance ``{(x_coords, y_coords): weight}``."""
        clean = {}
        for (x, y), w in edges.items():
            x = tuple(int(v) for v in np.atleast_1d(x))
            y = tuple(int(v) for v in np.atleast_1d(y))
            if x == y:
                if w != 0:
                    raise ValueError("C(x, x) must vanish")
                continue
            if not signed and w < 0:
                raise ValueError(f"negative weight {w} on edge {x}->{y}")
            clean[(x, y)] = w
        if d is None:
            d = len(next(iter(clean))[0]) if clean else 1
        offsets = sorted({tuple(b - a for a, b in zip(x, y)) for x, y in clean})
        return cls(n, alpha, d, offsets, kind="edges", edges=clean,
                   range_bound=range_bound, signed=signed, name=name)

    @classmethod
    def from_function(cls, n, alpha, offsets, fn: Callable[[np.ndarray], np.ndarray], *,
                      d=None, range_bound=None, signed=False, name="") -> "Conductance":
        """Conductance given by a vectorised callback ``fn(X) -> (N, m)``."""
        offs = _as_offsets(offsets)
        if d is None:
            d = offs.shape[1]
        return cls(n, alpha, d, offs, kind="function", fn=fn,
                   range_bound=range_bound, signed=signed, name=name)

    # ------------------------------------------------------------------ access
    def _stored_offset_weights(self) -> dict:
        if self.kind == "table":
            return dict(self.table)
        out: dict = {}
        if self.kind == "edges":
            for (x, y), w in self.edges.items():
                h = tuple(b - a for a, b in zip(x, y))
                if w != 0:
                    out[h] = w
        return out

    @property
    def translation_invariant(self) -> bool:
        return self.kind == "table"

    @property
    def num_offsets(self) -> int:
        return len(self.offsets)

    def offset_index(self, h: Sequence[int]) -> int:
        """Column of displacement ``h`` in :meth:`weights_at` output, -1 if absent."""
        return self._off_index.get(tuple(int(v) for v in h), -1)

    def reach(self) -> float:
        """Largest Euclidean displacement length (lattice units) carrying an offset."""
        if not len(self.offsets):
            return 0.0
        return float(np.sqrt((self.offsets ** 2).sum(axis=1)).max())

    def weights_at(self, coords: np.ndarray) -> np.ndarray:
        """Float weights ``C(x, x + h/n)`` for each row ``x`` of ``coords``.

        Returns an array of shape ``(N, m)`` aligned with :attr:`offsets`.
        """
        X = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        m = len(self.offsets)
        if self.kind == "table":
            return np.broadcast_to(self._table_vals, (len(X), m)).copy()
        if self.kind == "edges":
            out = np.zeros((len(X), m))
            offs = self.offsets.tolist()
            for r, x in enumerate(X.tolist()):
                for k, h in enumerate(offs):
                    w = self.edges.get((tuple(x), tuple(a + b for a, b in zip(x, h))))
                    if w is not None:
                        out[r, k] = float(w)
            return out
        out = np.asarray(self.fn(X), dtype=float)
        if out.shape != (len(X), m):
            raise ValueError(f"weight callback returned shape {out.shape}, expected {(len(X), m)}")
        return out

    def exact_weight(self, x: Sequence[int], y: Sequence[int]):
        """Stored weight of ``(x, y)`` in its native number type."""
        x = tuple(int(v) for v in x)
        y = tuple(int(v) for v in y)
        h = tuple(b - a for a, b in zip(x, y))
        if self.kind == "table":
            return self.table.get(h, 0)
        if self.kind == "edges":
            return self.edges.get((x, y), 0)
        k = self.offset_index(h)
        if k < 0:
            return 0.0
        return float(self.weights_at(np.asarray([x]))[0, k])

    def weight(self, x, y) -> float:
        """Float weight ``C(x, y)``; accepts coordinate tuples or lattice points."""
        x = getattr(x, "coords", x)
        y = getattr(y, "coords", y)
        return float(self.exact_weight(x, y))

    def stored_items(self) -> Iterable[tuple]:
        """Iterate stored ``(key, weight)`` pairs (table or edge storage only)."""
        if self.kind == "table":
            return self.table.items()
        if self.kind == "edges":
            return self.edges.items()
        raise TypeError("function-backed conductances have no stored items")

    def materialize(self, window: Window) -> "Conductance":
        """Explicit edge table of every nonzero weight leaving window points."""
        X = window.coords()
        W = self.weights_at(X)
        edges = {}
        for r, k in zip(*np.nonzero(W)):
            x = tuple(int(v) for v in X[r])
            y = tuple(int(a + b) for a, b in zip(X[r], self.offsets[k]))
            edges[(x, y)] = float(W[r, k])
        return Conductance.from_edges(self.n, self.alpha, edges, d=self.d,
                                      range_bound=self.range_bound, signed=self.signed,
                                      name=self.name)

    def is_zero(self) -> bool:
        if self.kind in ("table", "edges"):
            return all(w == 0 for _, w in self.stored_items())
        return False

    def __repr__(self) -> str:
        return (f"Conductance(kind={self.kind!r}, n={self.n}, alpha={self.alpha}, d={self.d}, "
                f"offsets={len(self.offsets)}, name={self.name!r})")

    # ------------------------------------------------------------------ algebra
    def __add__(self, other: "Conductance") -> "Conductance":
        return combine(self, other, 1, 1)

    def scaled(self, factor) -> "Conductance":
        return combine(self, None, factor, 0)

    # ------------------------------------------------------------------ serialization
    def to_text(self, window: Window | None = None) -> str:
        """Line-oriented text: header ``n alpha d kind``, then weight lines.

        Tables write ``h_1 .. h_d weight``; everything else is written as
        ``x_1 .. x_d y_1 .. y_d weight`` (function kernels require ``window``).
        """
        src = self
        if self.kind == "function":
            if window is None:
                raise ValueError("function-backed conductance needs a window to serialize")
            src = self.materialize(window)
        kind = "table" if src.kind == "table" else "edges"
        lines = [f"{src.n} {src.alpha!r} {src.d} {kind}"]
        for key, w in sorted(src.stored_items()):
            coords = list(key) if kind == "table" else list(key[0]) + list(key[1])
            lines.append(" ".join(str(c) for c in coords) + " " + _fmt_weight(w))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, *, signed: bool = False) -> "Conductance":
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip() and not ln.startswith("#")]
        n, alpha, d, kind = int(rows[0][0]), float(rows[0][1]), int(rows[0][2]), rows[0][3]
        data = {}
        for r in rows[1:]:
            w = _parse_weight(r[-1])
            ints = [int(v) for v in r[:-1]]
            if kind == "table":
                data[tuple(ints)] = w
            else:
                data[(tuple(ints[:d]), tuple(ints[d:]))] = w
        if kind == "table":
            return cls.from_table(n, alpha, data, d=d, signed=signed)
        return cls.from_edges(n, alpha, data, d=d, signed=signed)


def _fmt_weight(w) -> str:
    if isinstance(w, Fraction):
        return f"{w.numerator}/{w.denominator}"
    return repr(float(w))


def _parse_weight(s: str):
    return Fraction(s) if "/" in s else float(s)


def combine(a: Conductance, b: Conductance | None, ca, cb, *, signed=None) -> Conductance:
    """Linear combination ``ca * a + cb * b`` (exact when both are stored kernels)."""
    if b is not None and (a.n != b.n or a.d != b.d):
        raise ValueError("scale mismatch")
    if signed is None:
        signed = a.signed or (b is not None and b.signed) or ca < 0 or cb < 0
    rb = None
    if a.range_bound is not None and (b is None or b.range_bound is not None):
        rb = max(a.range_bound, b.range_bound if b is not None else 0)
    parts = [(a, ca)] + ([(b, cb)] if b is not None else [])
    kinds = {p.kind for p, _ in parts}
    if kinds == {"table"}:
        out: dict = {}
        for p, c in parts:
            for h, w in p.table.items():
                out[h] = out.get(h, 0) + c * w
        return Conductance.from_table(a.n, a.alpha, out, d=a.d, range_bound=rb, signed=signed)
    if kinds <= {"edges"}:
        out = {}
        for p, c in parts:
            for e, w in p.edges.items():
                out[e] = out.get(e, 0) + c * w
        return Conductance.from_edges(a.n, a.alpha, out, d=a.d, range_bound=rb, signed=signed)
    offs = sorted({tuple(h) for p, _ in parts for h in p.offsets.tolist()})
    cols = [np.array([p.offset_index(h) for h in offs]) for p, _ in parts]

    def fn(X, parts=parts, cols=cols, m=len(offs)):
        out = np.zeros((len(X), m))
        for (p, c), col in zip(parts, cols):
            W = p.weights_at(X)
            ok = col >= 0
            out[:, ok] += c * W[:, col[ok]]
        return out

    return Conductance.from_function(a.n, a.alpha, offs, fn, d=a.d, range_bound=rb, signed=signed)


def nearest_neighbor(n: int, d: int = 1, weight=Fraction(1, 2), alpha: float = 2.0) -> Conductance:
    """Nearest-neighbour conductance ``NN``: ``weight`` on every unit edge."""
    table = {}
    for i in range(d):
        for s in (1, -1):
            h = [0] * d
            h[i] = s
            table[tuple(h)] = weight
    return Conductance.from_table(n, alpha, table, d=d, range_bound=1.0, name="NN")


# ====================================================================== decomposition
@dataclass
class DecomposedConductance:
    """Symmetric part ``sym``, antisymmetric part ``asym`` and the full kernel.

    ``aux_J`` and ``aux_j`` are the comparison kernels of the structural
    assumptions; both default to ``sym``.
    """

    sym: Conductance
    asym: Conductance
    full: Conductance | None = None
    aux_J: Conductance | None = None
    aux_j: Conductance | None = None

    def __post_init__(self):
        if self.full is None:
            self.full = combine(self.sym, self.asym, 1, 1, signed=False)

    @property
    def n(self) -> int:
        return self.sym.n

    @property
    def alpha(self) -> float:
        return self.sym.alpha

    @property
    def d(self) -> int:
        return self.sym.d

    @property
    def J(self) -> Conductance:
        return self.aux_J if self.aux_J is not None else self.sym

    @property
    def j(self) -> Conductance:
        return self.aux_j if self.aux_j is not None else self.sym

    def reconstruction_error(self):
        """Max ``|C - (sym + asym)|`` over stored edges (exact for stored kernels)."""
        c = self.full
        if c.kind == "function":
            raise TypeError("exact reconstruction needs table or edge storage")
        keys = list(dict(c.stored_items()))
        if c.kind == "table":
            keys = set(keys) | {tuple(-v for v in h) for h in keys}
            errs = [abs(c.table.get(h, 0) - (self.sym.table.get(h, 0) + self.asym.table.get(h, 0)))
                    for h in keys]
        else:
            keys = set(keys) | {(y, x) for x, y in keys}
            errs = [abs(c.edges.get(e, 0) - (self.sym.edges.get(e, 0) + self.asym.edges.get(e, 0)))
                    for e in keys]
        return max(errs, default=0)


def _exact(w):
    return w if isinstance(w, (Fraction, int)) else Fraction(w)


def decompose(c: Conductance) -> DecomposedConductance:
    """Split ``C`` into ``C_s = (C + C^T)/2`` and ``C_a = (C - C^T)/2``.

    Stored kernels are split in exact rational arithmetic, so that
    ``C = C_s + C_a`` holds with no rounding; function kernels are split
    lazily in floating point.
    """
    if c.kind == "table":
        keys = set(c.table) | {tuple(-v for v in h) for h in c.table}
        sym, asym = {}, {}
        for h in keys:
            a = _exact(c.table.get(h, 0))
            b = _exact(c.table.get(tuple(-v for v in h), 0))
            sym[h] = (a + b) / 2
            asym[h] = (a - b) / 2
        s = Conductance.from_table(c.n, c.alpha, sym, d=c.d, range_bound=c.range_bound, name="sym")
        a = Conductance.from_table(c.n, c.alpha, asym, d=c.d, range_bound=c.range_bound,
                                   signed=True, name="asym")
        return DecomposedConductance(s, a, full=c)
    if c.kind == "edges":
        keys = set(c.edges) | {(y, x) for x, y in c.edges}
        sym, asym = {}, {}
        for (x, y) in keys:
            a = _exact(c.edges.get((x, y), 0))
            b = _exact(c.edges.get((y, x), 0))
            sym[(x, y)] = (a + b) / 2
            asym[(x, y)] = (a - b) / 2
        s = Conductance.from_edges(c.n, c.alpha, sym, d=c.d, range_bound=c.range_bound, name="sym")
        a = Conductance.from_edges(c.n, c.alpha, asym, d=c.d, range_bound=c.range_bound,
                                   signed=True, name="asym")
        return DecomposedConductance(s, a, full=c)

    offs = sorted({tuple(h) for h in c.offsets.tolist()} | {tuple(-v for v in h) for h in c.offsets.tolist()})
    offs_arr = np.asarray(offs, dtype=np.int64)
    src_col = np.array([c.offset_index(h) for h in offs])
    neg_col = np.array([c.offset_index(tuple(-v for v in h)) for h in offs])

    def parts(X):
        X = np.asarray(X, dtype=np.int64)
        fwd = np.zeros((len(X), len(offs)))
        bwd = np.zeros((len(X), len(offs)))
        W = c.weights_at(X)
        ok = src_col >= 0
        fwd[:, ok] = W[:, src_col[ok]]
        for k, h in enumerate(offs_arr):
            if neg_col[k] >= 0:
                bwd[:, k] = c.weights_at(X + h)[:, neg_col[k]]
        return fwd, bwd

    def sym_fn(X):
        f, b = parts(X)
        return 0.5 * (f + b)

    def asym_fn(X):
        f, b = parts(X)
        return 0.5 * (f - b)

    s = Conductance.from_function(c.n, c.alpha, offs, sym_fn, d=c.d, range_bound=c.range_bound, name="sym")
    a = Conductance.from_function(c.n, c.alpha, offs, asym_fn, d=c.d, range_bound=c.range_bound,
                                  signed=True, name="asym")
    return DecomposedConductance(s, a, full=c)


def total_rate(c: Conductance, x) -> float:
    """``C(x) = sum_y C(x, y)``."""
    coords = getattr(x, "coords", x)
    if c.kind in ("table", "edges"):
        xs = tuple(int(v) for v in coords)
        if c.kind == "table":
            return float(sum(c.table.values()))
        return float(sum(w for (a, _), w in c.edges.items() if a == xs))
    return float(math.fsum(c.weights_at(np.asarray([coords]))[0]))


# ====================================================================== reports
@dataclass
class AssumptionReport:
    assumption_id: str
    constants_found: dict = field(default_factory=dict)
    passed: bool = True
    witnesses: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.passed and self.witnesses:
            raise ValueError("a passed report cannot carry witnesses")

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=_json_default, sort_keys=True, indent=2)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


# ====================================================================== checkers
def lp_norm(values: np.ndarray, theta: float, n: int, d: int) -> float:
    """``L^theta`` norm w.r.t. counting measure scaled by ``n^-d``."""
    v = np.abs(np.asarray(values, dtype=float))
    if v.size == 0:
        return 0.0
    if math.isinf(theta):
        return float(v.max())
    return float((np.sum(v ** theta) * float(n) ** (-d)) ** (1.0 / theta))


def _lengths(c: Conductance) -> np.ndarray:
    """Real displacement lengths ``|h|/n`` per offset."""
    return np.sqrt((c.offsets.astype(float) ** 2).sum(axis=1)) / c.n


def check_ctail(dc: DecomposedConductance, radii: Sequence[float], window: Window) -> AssumptionReport:
    """Tail sums ``n^alpha sum_{|x-y|>r} C_s`` (r <= 1) and ``C`` (r > 1).

    Reports the minimal constants ``c`` with ``tail(r) <= c r^-alpha`` on the
    small-radius grid and ``c_inf`` with ``tail(r) <= c_inf r^-delta`` on the
    large-radius grid, where ``delta`` is the least-squares log-log exponent.
    """
    n, alpha = dc.n, dc.alpha
    X = window.coords()
    small = sorted(r for r in radii if 0 < r <= 1)
    large = sorted(r for r in radii if r > 1)
    bounded = dc.full.range_bound is not None
    reach = max(dc.sym.reach(), dc.full.reach()) / n
    for r in small + large:
        if not bounded and r >= reach:
            raise ValueError(f"window margin insufficient: radius {r} beyond computed reach {reach:.4g}")
    Ws = dc.sym.weights_at(X)
    Wc = dc.full.weights_at(X)
    ls = _lengths(dc.sym)
    lc = _lengths(dc.full)
    tails_small = [float((n ** alpha * Ws[:, ls > r].sum(axis=1)).max(initial=0.0)) for r in small]
    tails_large = [float((n ** alpha * Wc[:, lc > r].sum(axis=1)).max(initial=0.0)) for r in large]
    c_small = max((t * r ** alpha for t, r in zip(tails_small, small)), default=0.0)
    delta = math.inf
    c_large = 0.0
    pos = [(r, t) for r, t in zip(large, tails_large) if t > 0]
    if len(pos) >= 2:
        slope = np.polyfit(np.log([p[0] for p in pos]), np.log([p[1] for p in pos]), 1)[0]
        delta = float(-slope)
    elif len(pos) == 1:
        delta = alpha
    if pos and math.isfinite(delta):
        c_large = max(t * r ** delta for r, t in pos)
    passed = math.isfinite(c_small) and math.isfinite(c_large) and delta > 0
    return AssumptionReport(
        "CTail0" if not large else "CTailInf",
        {"c": c_small, "c_inf": c_large, "delta": delta},
        passed,
        [] if passed else [{"delta": delta}],
        {"radii_small": small, "tails_small": tails_small,
         "radii_large": large, "tails_large": tails_large},
    )


def k1_density(dc: DecomposedConductance, coords: np.ndarray, r: float | None = None):
    """``W(x) = n^alpha sum_y |C_a(x,y)|^2 / J(x,y)`` with ``0/0 := 0``.

    Returns ``(W, witnesses)`` where ``witnesses`` lists edges with ``C_a != 0``
    but ``J = 0``.  When ``r`` is given only ``|x - y| < r`` contributes.
    """
    ca = dc.asym
    J = dc.J
    Wa = ca.weights_at(coords)
    cols = np.array([J.offset_index(h) for h in ca.offsets.tolist()], dtype=np.int64)
    WJ = np.zeros_like(Wa)
    if len(cols):
        ok = cols >= 0
        WJ[:, ok] = J.weights_at(coords)[:, cols[ok]]
    if r is not None:
        keep = _lengths(ca) < r
        Wa = Wa[:, keep]
        WJ = WJ[:, keep]
    bad = (Wa != 0) & (WJ <= 0)
    witnesses = []
    for i, k in zip(*np.nonzero(bad)):
        witnesses.append({"x": coords[i].tolist(), "k": int(k)})
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(WJ > 0, Wa * Wa / np.where(WJ > 0, WJ, 1.0), 0.0)
    return dc.n ** dc.alpha * ratio.sum(axis=1), witnesses


def check_k1(dc: DecomposedConductance, theta: float, window: Window,
             radii: Sequence[float] = ()) -> AssumptionReport:
    """Integrability of ``W``: reports ``A = ||W||_{L^theta(window)}``.

    The localized norms for each ``r`` in ``radii`` are stored in
    ``details['localized']``.
    """
    d, alpha = dc.d, dc.alpha
    if not theta > d / alpha:
        raise ValueError("theta must exceed d / alpha")
    X = window.coords()
    W, wit = k1_density(dc, X)
    if wit:
        return AssumptionReport("K1", {"A": math.inf, "theta": theta}, False, wit[:20])
    A = lp_norm(W, theta, dc.n, d)
    loc = {}
    for r in radii:
        Wr, _ = k1_density(dc, X, r)
        loc[float(r)] = lp_norm(Wr, theta, dc.n, d)
    return AssumptionReport("K1", {"A": A, "theta": theta}, math.isfinite(A), [],
                            {"localized": loc, "W_max": float(W.max(initial=0.0))})


def check_k2(dc: DecomposedConductance, window: Window, D: float | None = None) -> AssumptionReport:
    """Pointwise lower bound ``C >= (1 - D) j``.

    ``D_min`` is the smallest admissible constant over the window edges.  With
    a declared ``D`` the check passes iff the bound holds with that constant.
    The form comparison with ``j = C_s`` holds with constant 1; other ``j``
    are flagged as sampled only.
    """
    X = window.coords()
    C = dc.full.weights_at(X)
    if (C < 0).any():
        i, k = np.argwhere(C < 0)[0]
        raise ValueError(f"negative conductance at x={X[i].tolist()} h={dc.full.offsets[k].tolist()}")
    j = dc.j
    cols = np.array([dc.full.offset_index(h) for h in j.offsets.tolist()], dtype=np.int64)
    Wj = j.weights_at(X)
    Cj = np.zeros_like(Wj)
    ok = cols >= 0
    Cj[:, ok] = C[:, cols[ok]]
    pos = Wj > 0
    ratios = np.where(pos, Cj / np.where(pos, Wj, 1.0), np.inf)
    D_min = float(max(0.0, 1.0 - ratios.min(initial=np.inf))) if pos.any() else 0.0
    target = D if D is not None else D_min
    passed = D_min < 1 and D_min <= target + 1e-12
    wit = []
    if not passed:
        bad = pos & (Cj < (1 - target) * Wj - 1e-15)
        wit = [{"x": X[i].tolist(), "h": j.offsets[k].tolist()} for i, k in list(zip(*np.nonzero(bad)))[:20]]
        if not wit:
            wit = [{"D_min": D_min}]
    consts = {"D": target, "D_min": D_min, "form_constant": 1.0}
    details = {"form_comparison": "identity" if dc.aux_j is None else "sampled only"}
    return AssumptionReport("K2", consts, passed, wit, details)


def check_nnrw(dc: DecomposedConductance, window: Window) -> AssumptionReport:
    """Direct-edge comparability with the nearest-neighbour walk: ``C_s >= eps`` on unit edges."""
    X = window.coords()
    W = dc.sym.weights_at(X)
    d = dc.d
    eps = math.inf
    wit = []
    for i in range(d):
        for s in (1, -1):
            h = [0] * d
            h[i] = s
            k = dc.sym.offset_index(h)
            col = W[:, k] if k >= 0 else np.zeros(len(X))
            eps = min(eps, float(col.min(initial=np.inf)))
            for r in np.nonzero(col <= 0)[0][:20]:
                wit.append({"x": X[r].tolist(), "h": h})
    if not math.isfinite(eps):
        eps = 0.0
    passed = eps > 0
    if dc.alpha != 2:
        details = {"warning": "nearest-neighbour comparability is meant for alpha = 2"}
    else:
        details = {}
    return AssumptionReport("NNRW", {"eps": eps}, passed, [] if passed else wit, details)


def second_moment(dc: DecomposedConductance, r: float, window: Window) -> float:
    """``sup_x n^alpha sum_{|x-y| < r} |x-y|^2 C_s(x, y)``."""
    if not 0 < r <= 1:
        raise ValueError("radius must lie in (0, 1]")
    X = window.coords()
    W = dc.sym.weights_at(X)
    L = _lengths(dc.sym)
    keep = L < r
    vals = dc.n ** dc.alpha * (W[:, keep] * L[keep] ** 2).sum(axis=1)
    return float(vals.max(initial=0.0))


def ball_form_matrix(dc: DecomposedConductance, ball: Ball, window: Window):
    """Dense matrix ``S`` with ``v^T S v = E_s`` restricted to pairs inside the ball.

    Returns ``(S, coords)``; ``E_s^B(v, v) = n^(alpha-d) sum_{x,y in B} (v(x)-v(y))^2 C_s(x,y)``.
    """
    coords = window.coords()
    coords = coords[ball.contains_coords(coords)]
    N = len(coords)
    index = {tuple(c): i for i, c in enumerate(coords.tolist())}
    W = dc.sym.weights_at(coords)
    S = np.zeros((N, N))
    for i, x in enumerate(coords.tolist()):
        for k, h in enumerate(dc.sym.offsets.tolist()):
            w = W[i, k]
            if w == 0:
                continue
            j = index.get(tuple(a + b for a, b in zip(x, h)))
            if j is None:
                continue
            # ordered pair (x, y): (v_i - v_j)^2 w
            S[i, i] += w
            S[j, j] += w
            S[i, j] -= w
            S[j, i] -= w
    S *= float(dc.n) ** (dc.alpha - dc.d)
    return S, coords


def check_poinc_sampled(dc: DecomposedConductance, r: float, trials: int, seed: int,
                        window: Window | None = None, center=None,
                        sigma: float = DEFAULT_SIGMA, refine: int = 6) -> AssumptionReport:
    """Randomised falsification of the Poincare inequality on ``B_r``.

    Each trial draws a Gaussian ``v`` and also follows ``refine`` steps of
    inverse iteration started from it; the worst ratio
    ``var(v) / (r^alpha E_s^B(v, v))`` is a lower bound for the true constant.
    """
    n, d = dc.n, dc.d
    if r <= sigma / (2 * n):
        raise ValueError("radius below the resolvable scale sigma/(2n)")
    from .lattice import LatticePoint
    if center is None:
        center = LatticePoint.origin(d, n)
    if window is None:
        k = int(math.ceil(r * n)) + 1
        window = Window(n, tuple(c - k for c in center.coords), tuple(c + k for c in center.coords))
    ball = Ball(center, r)
    S, coords = ball_form_matrix(dc, ball, window)
    N = len(coords)
    mu = float(n) ** (-d)
    rng = np.random.default_rng(seed)
    best = 0.0
    wit = []
    skipped = 0
    shift = 1e-9 * max(1.0, float(np.abs(S).max(initial=0.0)))
    try:
        solver = np.linalg.cholesky(S + shift * np.eye(N)) if N else None
    except np.linalg.LinAlgError:
        solver = None

    def ratio(v):
        vc = v - v.mean()
        var = mu * float(vc @ vc)
        e = float(v @ S @ v)
        if var <= 1e-300:
            return 0.0, True
        if e <= 1e-14 * var:
            return math.inf, False
        return var / (r ** dc.alpha * e), True

    for _ in range(trials):
        v = rng.standard_normal(N)
        cand = [v]
        if solver is not None:
            w = v - v.mean()
            for _ in range(refine):
                w = np.linalg.solve(solver.T, np.linalg.solve(solver, w))
                w -= w.mean()
                w /= max(np.linalg.norm(w), 1e-300)
                cand.append(w)
        for c in cand:
            q, ok = ratio(c)
            if not ok:
                if not wit:
                    wit.append({"v": c.tolist()})
                continue
            if q == 0.0 and np.ptp(c) == 0:
                skipped += 1
            best = max(best, q)
    passed = not wit
    return AssumptionReport("Poinc_sampled", {"c": best if passed else math.inf, "r": r},
                            passed, wit[:1], {"points": N, "trials": trials, "constant_samples": skipped,
                                              "note": "lower bound from sampling, not a proof"})


def poincare_constant_exact(dc: DecomposedConductance, r: float, center=None) -> float:
    """Exact best constant on ``B_r`` from the Neumann eigenproblem (small balls only)."""
    from .lattice import LatticePoint
    n, d = dc.n, dc.d
    if center is None:
        center = LatticePoint.origin(d, n)
    k = int(math.ceil(r * n)) + 1
    window = Window(n, tuple(c - k for c in center.coords), tuple(c + k for c in center.coords))
    S, coords = ball_form_matrix(dc, Ball(center, r), window)
    ev = np.linalg.eigvalsh(S / float(n) ** (-d))
    lam2 = ev[1] if len(ev) > 1 else math.inf
    if lam2 <= 1e-12:
        return math.inf
    return 1.0 / (r ** dc.alpha * lam2)
