"""Generators, bilinear forms, semigroups, resolvents and Green vectors.

The generator is ``L u(x) = 2 n^alpha sum_y (u(y) - u(x)) C(x, y)``.  On a
window it is assembled either in ``full`` mode (torus wrap, or absorbing
windows whose rows never leave the window) or in ``killed`` mode, where the
state space is an inner set, the diagonal keeps the full jump rate and
columns outside the inner set are dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats

from .conductance import DecomposedConductance, Conductance
from .lattice import Ball, LatticeFunction, Window

__all__ = [
    "GeneratorMatrix",
    "LatticeFunction",
    "SolverError",
    "assemble",
    "exact_rows",
    "bilinear_form",
    "garding_sector_constants",
    "semigroup_apply",
    "killed_semigroup",
    "resolvent",
    "resolvent_identity_residual",
    "green_vector",
    "maximum_principle_check",
    "uniformization_terms",
]

DIRECT_LIMIT = 4000
MAX_TERMS = 10 ** 6


class SolverError(RuntimeError):
    pass


@dataclass
class GeneratorMatrix:
    """Sparse generator on a finite state set.

    ``coords`` lists the states (integer coordinates); ``matrix`` is CSR with
    off-diagonal entries ``2 n^alpha C(x, y)`` and diagonal ``-2 n^alpha C(x)``.
    """

    window: Window
    n: int
    alpha: float
    matrix: sp.csr_matrix
    coords: np.ndarray
    mode: str
    inner: np.ndarray | None = None
    lambda0_estimate: float = 0.1
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def rates(self) -> np.ndarray:
        """Total jump rates ``-L(x, x)``."""
        return -self.matrix.diagonal()

    def function(self, values) -> LatticeFunction:
        return LatticeFunction(self.coords, self.n, values)

    def evaluate(self, f) -> np.ndarray:
        """Values of a callable of real points at the states."""
        return np.asarray(f(self.coords / self.n), dtype=float).reshape(-1)

    def apply(self, u) -> np.ndarray:
        return self.matrix @ _vals(u)

    def row_sums(self) -> np.ndarray:
        """Row sums with exactly rounded summation per row."""
        A = self.matrix
        return np.array([math.fsum(A.data[A.indptr[i]:A.indptr[i + 1]]) for i in range(A.shape[0])])

    def to_coo_text(self) -> str:
        A = self.matrix.tocoo()
        return "".join(f"{i} {j} {v!r}\n" for i, j, v in zip(A.row, A.col, A.data))


def _vals(u) -> np.ndarray:
    return u.values.astype(float) if isinstance(u, LatticeFunction) else np.asarray(u, dtype=float)


def assemble(dc: DecomposedConductance | Conductance, window: Window, mode: str = "full",
             inner=None) -> GeneratorMatrix:
    """Assemble the generator on ``window``.

    Parameters
    ----------
    mode : {"full", "killed"}
        ``full`` uses every window point; on an absorbing window any positive
        rate leaving the window raises ``ValueError("boundary leakage unmodeled")``.
        ``killed`` restricts to ``inner`` (a :class:`Ball`, boolean mask over
        ``window.coords()`` or ``None`` for the whole window) and keeps the
        full diagonal.
    """
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    n, alpha = C.n, C.alpha
    X = window.coords()
    if mode == "full":
        mask = np.ones(len(X), bool)
    elif mode == "killed":
        if inner is None:
            mask = np.ones(len(X), bool)
        elif isinstance(inner, Ball):
            mask = inner.contains_coords(X)
        else:
            mask = np.asarray(inner, bool)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    states = X[mask]
    N = len(states)
    pos = -np.ones(len(X), dtype=np.int64)
    pos[np.nonzero(mask)[0]] = np.arange(N)
    W = C.weights_at(states)
    if (W < 0).any():
        raise ValueError("negative conductance")
    scale = 2.0 * float(n) ** alpha
    rows, cols, vals = [], [], []
    for k, h in enumerate(C.offsets):
        w = W[:, k]
        nz = np.nonzero(w)[0]
        if not len(nz):
            continue
        Y = states[nz] + h
        idx = window.index_of(Y)
        if mode == "full" and not window.is_torus and (idx < 0).any():
            raise ValueError("boundary leakage unmodeled")
        tgt = np.where(idx >= 0, pos[np.maximum(idx, 0)], -1)
        keep = tgt >= 0
        rows.append(nz[keep])
        cols.append(tgt[keep])
        vals.append(scale * w[nz[keep]])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    off.sum_duplicates()
    # self-loops from torus wrap-around carry no dynamics; drop them
    off.setdiag(0)
    off.eliminate_zeros()
    # full diagonal = -(total rate); in full mode this equals minus the row sum
    total = scale * np.array([math.fsum(r) for r in W])
    if mode == "full":
        total = np.array([math.fsum(off.data[off.indptr[i]:off.indptr[i + 1]]) for i in range(N)])
    L = (off + sp.diags(-total)).tocsr()
    L.sort_indices()
    return GeneratorMatrix(window, n, alpha, L, states, mode, inner=mask if mode == "killed" else None)


def exact_rows(c: Conductance, window: Window) -> list[dict]:
    """Exact rational generator rows on a torus window (stored kernels only).

    Returns one ``{column: Fraction}`` dict per window point; the diagonal is
    minus the exact sum of off-diagonal entries.
    """
    if c.kind not in ("table", "edges"):
        raise TypeError("exact assembly needs table or edge storage")
    if not window.is_torus:
        raise ValueError("exact rows are defined on torus windows")
    X = window.coords()
    if not float(c.alpha).is_integer():
        raise ValueError("exact assembly needs an integer alpha")
    scale = 2 * Fraction(c.n) ** int(c.alpha)
    out = []
    for i, x in enumerate(X.tolist()):
        row: dict = {}
        for h in c.offsets.tolist():
            y = tuple(a + b for a, b in zip(x, h))
            w = Fraction(c.exact_weight(x, y))
            if w == 0:
                continue
            j = int(window.index_of(np.asarray([y]))[0])
            if j == i:
                continue
            row[j] = row.get(j, Fraction(0)) + scale * w
        row[i] = -sum(row.values(), Fraction(0))
        out.append(row)
    return out


# ====================================================================== forms
def _extended_values(u: LatticeFunction, window: Window, Y: np.ndarray) -> np.ndarray:
    idx = window.index_of(Y)
    vals = np.zeros(len(Y))
    ok = idx >= 0
    vals[ok] = u.values[idx[ok]]
    return vals, ok


def bilinear_form(dc: DecomposedConductance, u: LatticeFunction, v: LatticeFunction,
                  window: Window | None = None) -> tuple[float, float, float]:
    """``(E(u, v), E^{C_s}(u, v), E^{C_a}(u, v))`` for functions on a window.

    On an absorbing window ``u`` and ``v`` are extended by zero, so the values
    agree with ``<-L u, v>`` for the killed generator on that window.

    ``E = 2 n^(alpha-d) sum (u(x)-u(y)) v(x) C(x,y)``,
    ``E^{C_s} = n^(alpha-d) sum (u(x)-u(y))(v(x)-v(y)) C_s(x,y)`` and
    ``E^{C_a} = n^(alpha-d) sum (u(x)-u(y))(v(x)+v(y)) C_a(x,y)``.
    """
    if window is None:
        lo = u.coords.min(axis=0)
        hi = u.coords.max(axis=0)
        window = Window(u.scale, tuple(lo), tuple(hi))
        if len(u.coords) != window.size:
            raise ValueError("functions must cover a full window")
    X = window.coords()
    if not np.array_equal(X, u.coords) or not np.array_equal(X, v.coords):
        raise ValueError("u and v must be given on the window in its point order")
    n, d, alpha = dc.n, dc.d, dc.alpha
    pref = float(n) ** (alpha - d)
    uu = u.values.astype(float)
    vv = v.values.astype(float)
    total = []
    sym = []
    asym = []
    Wc = dc.full.weights_at(X)
    for k, h in enumerate(dc.full.offsets):
        uy, _ = _extended_values(u, window, X + h)
        total.append(2 * (uu - uy) * vv * Wc[:, k])
    for kern, acc, sign in ((dc.sym, sym, -1), (dc.asym, asym, +1)):
        Wk = kern.weights_at(X)
        for k, h in enumerate(kern.offsets):
            uy, ok = _extended_values(u, window, X + h)
            vy, _ = _extended_values(v, window, X + h)
            term = (uu - uy) * (vv + sign * vy) * Wk[:, k]
            # pairs (y, x) with y outside the window equal the (x, y) term
            acc.append(np.where(ok, term, 2 * term))
    tot = pref * math.fsum(np.concatenate(total)) if total else 0.0
    s = pref * math.fsum(np.concatenate(sym)) if sym else 0.0
    a = pref * math.fsum(np.concatenate(asym)) if asym else 0.0
    return tot, s, a


def inner_product(u, v, n: int, d: int) -> float:
    return float(np.dot(_vals(u), _vals(v))) * float(n) ** (-d)


def garding_sector_constants(dc: DecomposedConductance, window: Window, trials: int = 200,
                             seed: int = 0, theta: float = math.inf) -> dict:
    """Sampled Garding and sector constants on a window (functions vanish outside).

    ``c1`` is the largest observed ``(E_s(u,u)/2 - E(u,u)) / ||u||^2`` and
    ``c2`` the largest observed ``E(u,v)^2 / (E_s(u,u) (E_s(v,v) + ||v||^2))``.
    Both are lower bounds for the admissible constants.  ``c1_analytic`` is
    ``2 ||W||_inf``, the bound from splitting the antisymmetric form against
    the symmetric one with the (K1) density ``W``.
    """
    from .conductance import k1_density

    rng = np.random.default_rng(seed)
    X = window.coords()
    N = len(X)
    mu = float(dc.n) ** (-dc.d)
    L = assemble(dc, window, "killed")
    A = -mu * L.matrix.tocsr()

    # the symmetric form with zero extension, via the symmetric kernel only
    sym_dc = DecomposedConductance(dc.sym, Conductance.from_table(dc.n, dc.alpha, {}, d=dc.d, signed=True),
                                   full=dc.sym)
    S = -mu * assemble(sym_dc, window, "killed").matrix.tocsr()
    c1 = 0.0
    c2 = 0.0
    skipped = 0
    smooth = _smoothing(window)
    for t in range(trials):
        u = rng.standard_normal(N)
        v = rng.standard_normal(N)
        if t % 2:
            u = smooth(u)
            v = smooth(v)
        es_u = float(u @ (S @ u))
        es_v = float(v @ (S @ v))
        nu = mu * float(u @ u)
        nv = mu * float(v @ v)
        e_uu = float(u @ (A @ u))
        e_uv = float(v @ (A @ u))
        if es_u <= 0 and np.ptp(u) > 0:
            skipped += 1
            continue
        c1 = max(c1, (0.5 * es_u - e_uu) / nu)
        if es_u > 0:
            c2 = max(c2, e_uv ** 2 / (es_u * (es_v + nv)))
    W, _ = k1_density(dc, X)
    analytic = 2.0 * float(np.max(np.abs(W), initial=0.0))
    out = {"c1": c1, "c2": c2, "c1_analytic": analytic, "skipped": skipped,
           "trials": trials, "seed": seed}
    if N <= EXACT_FORM_LIMIT:
        out.update(_exact_form_constants(S.toarray(), A.toarray(), mu))
    out["lambda0"] = max(0.0, out.get("c1_exact", c1)) + 0.1
    return out


#: largest window for the dense eigenvalue computation of the form constants
EXACT_FORM_LIMIT = 2000


def _exact_form_constants(S: np.ndarray, A: np.ndarray, mu: float) -> dict:
    """Suprema of the two ratios over all functions on the window (dense linear algebra)."""
    M = 0.5 * S - 0.5 * (A + A.T)
    c1 = max(0.0, float(np.linalg.eigvalsh(M).max()) / mu)
    try:
        Q = np.linalg.cholesky(S)
        P = np.linalg.cholesky(S + mu * np.eye(len(S)))
    except np.linalg.LinAlgError:
        return {"c1_exact": c1}
    # E(u, v) = v^T A u; whiten u by S = Q Q^T and v by S + mu I = P P^T
    T = np.linalg.solve(P, np.linalg.solve(Q, A.T).T)
    c2 = float(np.linalg.norm(T, 2) ** 2)
    return {"c1_exact": c1, "c2_exact": c2}


def _smoothing(window: Window):
    shape = window.shape

    def smooth(u):
        g = u.reshape(shape)
        for ax in range(len(shape)):
            for _ in range(3):
                g = 0.25 * np.roll(g, 1, ax) + 0.5 * g + 0.25 * np.roll(g, -1, ax)
        return g.ravel()

    return smooth


# ====================================================================== semigroups
def uniformization_terms(mu: float, tol: float) -> int:
    """Number of Poisson terms ``K`` with ``P(Poisson(mu) > K) < tol``."""
    if mu == 0:
        return 0
    k = int(stats.poisson.isf(tol, mu)) + 1
    while stats.poisson.sf(k, mu) >= tol and k < MAX_TERMS:
        k += 1
    if k >= MAX_TERMS:
        raise SolverError(f"uniformization needs more than {MAX_TERMS} terms "
                          f"(achieved tail bound {stats.poisson.sf(MAX_TERMS, mu):.3g})")
    return k


def semigroup_apply(L: GeneratorMatrix, f, t: float, tol: float = 1e-13,
                    rate: float | None = None) -> np.ndarray:
    """``e^{tL} f`` by uniformization.

    With ``Lam >= max`` total rate, ``Pi = I + L/Lam`` is sub-stochastic and
    ``e^{tL} = sum_k Poisson(Lam t; k) Pi^k``.  The series is truncated once
    the Poisson tail drops below ``tol``.  Passing the same ``rate`` to
    several generators makes their truncations identical.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    f = _vals(f)
    if t == 0:
        return f.copy()
    Lam = float(rate) if rate is not None else float(L.rates.max(initial=0.0))
    if Lam < L.rates.max(initial=0.0) - 1e-9:
        raise ValueError("uniformization rate below the maximal jump rate")
    if Lam == 0:
        return f.copy()
    mu = Lam * t
    K = uniformization_terms(mu, tol)
    Pi = (sp.identity(L.size, format="csr") + L.matrix / Lam).tocsr()
    # Poisson weights via a stable recursion in log space
    ks = np.arange(K + 1)
    logw = -mu + ks * math.log(mu) - np.array([math.lgamma(k + 1) for k in ks])
    w = np.exp(logw)
    out = w[0] * f
    v = f
    for k in range(1, K + 1):
        v = Pi @ v
        if w[k] > 0:
            out = out + w[k] * v
    return out


def killed_semigroup(L_killed: GeneratorMatrix, f, t: float, tol: float = 1e-13,
                     rate: float | None = None) -> np.ndarray:
    """Sub-Markov semigroup of the process killed on leaving the inner set."""
    if L_killed.mode != "killed":
        raise ValueError("expected a killed-mode generator")
    return semigroup_apply(L_killed, f, t, tol, rate)


def semigroup_path(L: GeneratorMatrix, f, times, tol: float = 1e-13, rate: float | None = None):
    """``[e^{t L} f for t in times]`` (each computed independently)."""
    return [semigroup_apply(L, f, float(t), tol, rate) for t in times]


# ====================================================================== resolvent and Green vector
def _solve(A: sp.csr_matrix, b: np.ndarray, tol: float) -> np.ndarray:
    N = A.shape[0]
    if N <= DIRECT_LIMIT:
        return np.asarray(spla.spsolve(A.tocsc(), b)).reshape(-1)
    dinv = 1.0 / A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda x: dinv * x)
    x, info = spla.gmres(A, b, rtol=tol, atol=0.0, restart=60, maxiter=2000, M=M)
    res = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
    if info != 0 or res > 10 * tol:
        # sparse direct factorisation as fallback for stagnating Krylov runs
        try:
            x = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as exc:
            raise SolverError(f"solver stagnated with relative residual {res:.3g}") from exc
        res = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
        if res > 10 * tol:
            raise SolverError(f"solver stagnated with relative residual {res:.3g}")
    return x


def resolvent(L: GeneratorMatrix, f, lam: float, tol: float = 1e-12) -> np.ndarray:
    """Solve ``(lam - L) u = f``."""
    if lam <= L.lambda0_estimate - 0.1 and lam <= 0:
        raise ValueError("lambda must exceed the lower-bound estimate")
    A = (lam * sp.identity(L.size, format="csr") - L.matrix).tocsr()
    u = _solve(A, _vals(f), tol)
    if not np.all(np.isfinite(u)):
        raise SolverError("resolvent solve produced non-finite values")
    return u


def resolvent_identity_residual(dc: DecomposedConductance, window: Window, u, f, g, lam: float) -> float:
    """``|E(u, g) + lam <u, g> - <f, g>|`` with ``E`` from :func:`bilinear_form`."""
    X = window.coords()
    U = LatticeFunction(X, dc.n, _vals(u))
    G = LatticeFunction(X, dc.n, _vals(g))
    e, _, _ = bilinear_form(dc, U, G, window)
    ip = lambda a, b: inner_product(a, b, dc.n, dc.d)
    return abs(e + lam * ip(u, g) - ip(f, g))


def green_vector(L_killed: GeneratorMatrix, tol: float = 1e-12) -> np.ndarray:
    """Mean exit times: solve ``-L u = 1`` on the inner set."""
    if L_killed.mode != "killed":
        raise ValueError("expected a killed-mode generator")
    A = (-L_killed.matrix).tocsc()
    b = np.ones(L_killed.size)
    try:
        with np.errstate(all="raise"):
            u = _solve(A, b, tol)
    except (RuntimeError, FloatingPointError, SolverError) as exc:
        raise SolverError("singular system: absorbing set unreachable") from exc
    if not np.all(np.isfinite(u)) or np.linalg.norm(A @ u - b) > 1e-6 * math.sqrt(len(b)) * max(1.0, np.abs(u).max()):
        raise SolverError("singular system: absorbing set unreachable")
    return u


# ====================================================================== maximum principle
def maximum_principle_check(L_killed: GeneratorMatrix, trials: int = 50, seed: int = 0,
                            times=(0.01, 0.05, 0.1, 0.5), tol: float = 1e-10) -> dict:
    """Evolve random signed data with the killed semigroup.

    Nonpositive data must stay ``<= tol``; nonnegative data must stay
    ``>= -1e-12``.  Violations are returned as witnesses.
    """
    rng = np.random.default_rng(seed)
    worst_max = -math.inf
    worst_min = math.inf
    wit = []
    N = L_killed.size
    for trial in range(trials):
        u0 = -rng.exponential(size=N) * (rng.random(N) < 0.7)
        for t in times:
            ut = killed_semigroup(L_killed, u0, t)
            m = float(ut.max())
            worst_max = max(worst_max, m)
            if m > tol:
                wit.append({"trial": trial, "t": t, "max": m, "sign": "nonpositive"})
            pos = killed_semigroup(L_killed, -u0, t)
            mn = float(pos.min())
            worst_min = min(worst_min, mn)
            if mn < -1e-12:
                wit.append({"trial": trial, "t": t, "min": mn, "sign": "nonnegative"})
    return {"passed": not wit, "max_nonpositive": worst_max, "min_nonnegative": worst_min,
            "witnesses": wit[:20], "trials": trials, "seed": seed}
