"""Experiments along a sequence of scales ``n``.

Restriction ``R f = f|_{lattice}`` and extension ``E g(x) = g([x]_n)`` move
functions between the lattice and ``R^d``.  On top of them this module runs
resolvent convergence (Cauchy behaviour and a fine-grid oracle), moment and
tail benchmarks for the simulated chains, and uniformity-in-``n`` diagnostics
for Hölder moduli, weak Harnack ratios and survival thresholds.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .chain import McConfig, fdd_sample
from .conductance import Conductance, DecomposedConductance, _json_default
from .lattice import Ball, LatticeFunction, LatticePoint, Window
from .operators import assemble, resolvent, semigroup_apply

__all__ = [
    "RestrictExtend",
    "ExperimentReport",
    "restrict",
    "extend",
    "sup_distance",
    "resolvent_cauchy",
    "drift_benchmark",
    "stable_benchmark",
    "displacement_tail_rate",
    "holder_modulus",
    "harnack_ratio",
    "harnack_ratio_single",
    "survival_exceedance",
    "survival_threshold",
    "uniformity_slope",
    "extrapolated_limit",
    "BoundaryInfluenceError",
]


class BoundaryInfluenceError(ValueError):
    """The truncation window visibly changes the result on the evaluation set."""


# ====================================================================== restriction / extension
def restrict(f: Callable[[np.ndarray], np.ndarray], n: int, window: Window) -> LatticeFunction:
    """``R f``: values of ``f`` at the points ``x/n`` of ``window``."""
    if window.scale != n:
        raise ValueError("scale mismatch")
    return LatticeFunction.from_callable(window, f)


def extend(g: LatticeFunction, outside: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """``E g``: the cell-constant function ``x -> g([x]_n)``.

    Points whose cell is not in the support of ``g`` get ``outside``.
    """
    n = g.scale
    window = Window(n, tuple(g.coords.min(axis=0)), tuple(g.coords.max(axis=0)))
    vals = np.full(window.size, float(outside))
    vals[window.index_of(g.coords)] = g.values.astype(float)

    def Eg(x):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.shape[1] != g.dim and X.shape[0] == 1:
            X = X.T
        idx = window.index_of(np.floor(n * X + 1e-12).astype(np.int64))
        return np.where(idx >= 0, vals[np.maximum(idx, 0)], float(outside))

    return Eg


@dataclass
class RestrictExtend:
    """Restriction and extension at scale ``n`` with a fixed evaluation set ``K``."""

    n: int
    K: np.ndarray

    def restrict(self, f, window: Window) -> LatticeFunction:
        return restrict(f, self.n, window)

    def extend(self, g: LatticeFunction) -> np.ndarray:
        """``E g`` evaluated on ``K``."""
        return extend(g)(np.atleast_2d(self.K))


def sup_distance(g1: LatticeFunction, g2: LatticeFunction, K: np.ndarray) -> float:
    """``sup_K |E g1 - E g2|``."""
    K = np.atleast_2d(K)
    return float(np.max(np.abs(extend(g1)(K) - extend(g2)(K))))


# ====================================================================== reports
@dataclass
class ExperimentReport:
    """Result table (one row per ``n``) plus a summary dictionary.

    ``anchors`` names the mathematical properties the numbers test.
    """

    name: str
    anchors: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    passed: bool | None = None
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        for r in self.rows[1:]:
            keys += [k for k in r if k not in keys]
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _cell(r.get(k, "")) for k in keys})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"experiment": self.name, "anchors": self.anchors, "passed": self.passed,
                "summary": self.summary, "rows": self.rows, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=_json_default, indent=2, sort_keys=True)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, default=_json_default)
    return v


def _loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _check_grid(ns):
    ns = [int(v) for v in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_grid must be strictly increasing")
    return ns


# ====================================================================== resolvent convergence
def _resolvent_on(dc: DecomposedConductance, f, lam: float, radius: float) -> LatticeFunction:
    W = Window.cube(dc.n, radius, dc.d)
    L = assemble(dc, W, mode="killed")
    u = resolvent(L, L.evaluate(f), lam)
    return LatticeFunction(L.coords, dc.n, u)


def resolvent_cauchy(built: dict, f: Callable, lam: float, K: np.ndarray, *, radius: float = 6.0,
                     oracle: DecomposedConductance | None = None, boundary_tol: float = 0.01
                     ) -> ExperimentReport:
    """Sup-distances on ``K`` between ``E U_lam R f`` for consecutive scales.

    Every solve is done on a killed cube of half-width ``radius`` and repeated
    on the doubled cube; a relative sup-difference on ``K`` above
    ``boundary_tol`` raises :class:`BoundaryInfluenceError`.  ``oracle`` (for
    example the same family at a much finer scale) adds a benchmark column.
    """
    ns = _check_grid(sorted(built))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[0] == 1 and K.shape[1] > 1 and built[ns[0]].d == 1:
        K = K.T
    sols = {}
    for n in ns:
        u = _resolvent_on(built[n], f, lam, radius)
        u2 = _resolvent_on(built[n], f, lam, 2 * radius)
        a, b = extend(u)(K), extend(u2)(K)
        infl = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
        if infl > boundary_tol:
            raise BoundaryInfluenceError(
                f"window too small for resolvent decay at n={n}: boundary influence {infl:.3g}")
        sols[n] = u
    ref = None
    if oracle is not None:
        ref = extend(_resolvent_on(oracle, f, lam, radius))(K)
    vals = {n: extend(sols[n])(K) for n in ns}
    pair = np.array([[float(np.max(np.abs(vals[a] - vals[b]))) for b in ns] for a in ns])
    rows = []
    gaps = []
    for i, n in enumerate(ns):
        row = {"n": n}
        if i + 1 < len(ns):
            row["next_n"] = ns[i + 1]
            row["distance_to_next"] = float(pair[i, i + 1])
            gaps.append(float(pair[i, i + 1]))
        if ref is not None:
            row["distance_to_oracle"] = float(np.max(np.abs(vals[n] - ref)))
        rows.append(row)
    rate = -_loglog_slope(ns[:-1], gaps) if len(gaps) >= 2 else math.nan
    monotone = all(b < a for a, b in zip(gaps, gaps[1:]))
    cauchy = bool(monotone and rate > 0) if len(gaps) >= 2 else bool(gaps and gaps[0] == 0)
    summary = {"rate": rate, "cauchy": cauchy, "pairwise": pair.tolist(), "lambda": lam}
    if ref is not None:
        summary["oracle_n"] = oracle.n
        summary["final_oracle_distance"] = rows[-1]["distance_to_oracle"]
    return ExperimentReport("resolvent_convergence", ["resolvent convergence on compacts"],
                            rows, summary, cauchy)


# ====================================================================== chain benchmarks
def _moment_check(X: np.ndarray, mean0: np.ndarray, cov0: np.ndarray, z: float = 3.0) -> dict:
    """Compare sample mean and covariance with targets using per-entry standard errors."""
    N, d = X.shape
    m = X.mean(axis=0)
    se_m = X.std(axis=0, ddof=1) / math.sqrt(N)
    D = X - m
    prods = D[:, :, None] * D[:, None, :]
    cov = prods.sum(axis=0) / (N - 1)
    se_c = prods.reshape(N, -1).std(axis=0, ddof=1).reshape(d, d) / math.sqrt(N)
    mean_ok = bool(np.all(np.abs(m - mean0) <= z * se_m))
    cov_ok = bool(np.all(np.abs(cov - cov0) <= z * se_c))
    return {"mean": m.tolist(), "mean_se": se_m.tolist(), "mean_target": np.asarray(mean0).tolist(),
            "cov": cov.tolist(), "cov_se": se_c.tolist(), "cov_target": np.asarray(cov0).tolist(),
            "mean_ok": mean_ok, "cov_ok": cov_ok}


def drift_benchmark(built: dict, b: Sequence[float], t: float, cfg: McConfig, *, eps0: float = 0.0,
                    windows: dict | None = None, start=None) -> ExperimentReport:
    """Mean and covariance of ``X_t - x`` against the diffusion with generator ``(1+2 eps0) Delta - 2 b.grad``.

    The limiting mean displacement is ``-2 b t`` and the covariance
    ``2 t (1 + 2 eps0) I``.  Passing is decided at the largest ``n``.
    """
    ns = _check_grid(sorted(built))
    b = np.asarray(b, dtype=float)
    d = len(b)
    mean0 = -2.0 * b * t
    cov0 = 2.0 * t * (1 + 2 * eps0) * np.eye(d)
    rows = []
    for n in ns:
        s = LatticePoint.origin(d, n) if start is None else start
        W = (windows or {}).get(n) or Window.cube(n, max(2.0, 2 * float(np.abs(mean0).max()) + 8 * math.sqrt(t)), d)
        X = fdd_sample(built[n], s, [t], cfg, window=W)[:, 0, :] - np.asarray(s.coords) / n
        chk = _moment_check(X, mean0, cov0)
        rows.append({"n": n, **chk})
    last = rows[-1]
    passed = bool(last["mean_ok"] and last["cov_ok"])
    return ExperimentReport("drift_clt", ["mean and covariance of the drift diffusion limit"], rows,
                            {"t": t, "b": b.tolist(), "eps0": eps0, "paths": cfg.paths, "seed": cfg.seed},
                            passed)


def displacement_tail_rate(c: Conductance | DecomposedConductance, s: float) -> float:
    """``2 n^alpha sum_{|h| > s} C(0, h)``: the rate of jumps longer than ``s`` from the origin."""
    C = c.full if isinstance(c, DecomposedConductance) else c
    X = np.zeros((1, C.d), dtype=np.int64)
    w = C.weights_at(X)[0]
    lengths = np.sqrt((C.offsets.astype(float) ** 2).sum(axis=1)) / C.n
    return float(2.0 * float(C.n) ** C.alpha * math.fsum(w[lengths > s]))


def stable_benchmark(dc, cfg: McConfig, *, s: float = 0.5, t_small: float = 0.01,
                     t_pair: Sequence[float] = (0.1, 0.2), ks_tol: float = 0.05,
                     tail_tol: float = 0.10) -> ExperimentReport:
    """Small-time tail and ``t^(1/alpha)`` self-similarity checks for a stable-type chain.

    (i) ``P(|X_t - x| > s) / t`` at ``t = t_small`` against the jump rate
    beyond ``s`` read off the displacement table; (ii) two-sample KS distance
    between ``|X_t| / t^(1/alpha)`` at the two times in ``t_pair`` (independent
    path sets).  The median ratio and the mean are reported as well.
    """
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    n, d, alpha = C.n, C.d, C.alpha
    x0 = LatticePoint.origin(d, n)
    tail = displacement_tail_rate(C, s)
    X = fdd_sample(C, x0, [t_small], cfg)[:, 0, :]
    r = np.sqrt((X ** 2).sum(axis=1))
    p = float(np.mean(r > s))
    se = math.sqrt(max(p * (1 - p), 1.0 / cfg.paths) / cfg.paths)
    ratio = p / t_small / tail if tail > 0 else math.nan
    tail_ok = bool(abs(ratio - 1) <= tail_tol)
    samples = []
    means = []
    for k, tt in enumerate(t_pair):
        sub = McConfig(cfg.seed + 1 + k, cfg.paths, tt, cfg.jobs, cfg.block)
        Y = fdd_sample(C, x0, [tt], sub)[:, 0, :]
        means.append(Y.mean(axis=0).tolist())
        samples.append(np.sqrt((Y ** 2).sum(axis=1)))
    scaled = [smp / tt ** (1.0 / alpha) for smp, tt in zip(samples, t_pair)]
    ks = float(stats.ks_2samp(scaled[0], scaled[1]).statistic)
    med = [float(np.median(smp)) for smp in samples]
    med_ratio = med[1] / med[0] if med[0] > 0 else math.nan
    expect = (t_pair[1] / t_pair[0]) ** (1.0 / alpha)
    rows = [{"n": n, "t": t_small, "s": s, "exceedance": p, "exceedance_se": se,
             "tail_rate": tail, "ratio": ratio},
            {"n": n, "t": list(t_pair), "ks": ks, "median": med, "median_ratio": med_ratio,
             "median_ratio_expected": expect, "mean": means}]
    passed = bool(tail_ok and ks < ks_tol)
    return ExperimentReport("stable_limit", ["small-time jump tail", "stable self-similarity"], rows,
                            {"tail_ok": tail_ok, "ks": ks, "ks_ok": ks < ks_tol, "ratio": ratio,
                             "median_ratio": med_ratio, "paths": cfg.paths, "seed": cfg.seed},
                            passed)


# ====================================================================== regularity diagnostics
def holder_modulus(Ls: dict, f: Callable, t: float, h_grid: Sequence[float], K: float = 0.5,
                   stable_tol: float = 0.30) -> ExperimentReport:
    """Oscillation modulus ``omega(h)`` of ``P_t f`` on ``[-K, K]^d`` and fitted exponents.

    ``Ls`` maps ``n`` to a generator.  ``omega(h)`` is the largest difference
    between values at points ``x`` and ``x + h e_i`` inside the set, with ``h``
    rounded to the lattice.  The exponent ``gamma`` is the log-log slope of
    ``omega`` against ``h``; the fit is reported as ``flat`` when ``omega``
    vanishes.
    """
    ns = _check_grid(sorted(Ls))
    rows = []
    gammas = []
    for n in ns:
        L = Ls[n]
        u = semigroup_apply(L, L.evaluate(f), t)
        Z = L.coords
        inside = np.all(np.abs(Z) <= K * n + 1e-9, axis=1)
        lookup = {tuple(z): j for j, z in enumerate(Z.tolist())}
        hs, om = [], []
        for h in h_grid:
            k = max(1, int(round(h * n)))
            worst = 0.0
            for i in range(Z.shape[1]):
                shift = Z.copy()
                shift[:, i] += k
                jdx = np.array([lookup.get(tuple(z), -1) for z in shift.tolist()])
                ok = inside & (jdx >= 0)
                ok[ok] &= inside[jdx[ok]]
                if ok.any():
                    worst = max(worst, float(np.max(np.abs(u[ok] - u[jdx[ok]]))))
            hs.append(k / n)
            om.append(worst)
        flat = max(om) <= 1e-14 * max(1.0, float(np.abs(u).max(initial=0.0)))
        g = math.nan if flat else _loglog_slope(hs, om)
        if not flat:
            gammas.append(g)
        rows.append({"n": n, "h": hs, "omega": om, "gamma": g, "flat": flat})
    if gammas:
        spread = (max(gammas) - min(gammas)) / max(abs(min(gammas)), 1e-300)
        stable_ok = bool(min(gammas) > 0 and spread <= stable_tol)
    else:
        spread, stable_ok = 0.0, True
    return ExperimentReport("holder_modulus", ["Hölder continuity of the semigroup uniformly in n"], rows,
                            {"t": t, "gammas": gammas, "relative_spread": spread,
                             "flat": not gammas}, stable_ok)


def harnack_ratio_single(L_killed, u0, R: float, x0=None, time_points: int = 8, tol: float = 1e-13) -> float:
    """Weak parabolic Harnack ratio for ``u(t) = P^{B_2R}_t u0``.

    The space-time geometry starts at time ``0 = t_0 - R^alpha``: the early
    average is over ``t in (0, (R/2)^alpha)`` of the ``(nR/2)^-d``-normalised
    sum over ``B_{R/2}(x0)``; the late infimum is over
    ``t in (2 R^alpha - (R/2)^alpha, 2 R^alpha)`` and ``B_{R/2}(x0)``.  Time
    integrals use the midpoint rule and the infimum a uniform grid with
    endpoints.  Returns ``inf`` when the late infimum is exactly zero.
    """
    n, alpha = L_killed.n, L_killed.alpha
    d = L_killed.coords.shape[1]
    if x0 is None:
        x0 = LatticePoint.origin(d, n)
    small = Ball(x0, R / 2).contains_coords(L_killed.coords)
    u0 = np.asarray(u0, dtype=float)
    a = (R / 2) ** alpha
    T = 2 * R ** alpha
    early_t = (np.arange(time_points) + 0.5) * a / time_points
    late_t = np.linspace(T - a, T, time_points + 1)
    rate = float(L_killed.rates.max(initial=0.0))
    norm = (n * R / 2) ** (-d)
    early = np.mean([norm * semigroup_apply(L_killed, u0, tt, tol, rate)[small].sum() for tt in early_t])
    late = min(float(semigroup_apply(L_killed, u0, tt, tol, rate)[small].min()) for tt in late_t)
    if late <= 0:
        return math.inf
    return float(early / late)


def _bump_family(rng: np.random.Generator, d: int, radius: float, count: int = 3):
    centers = rng.uniform(-radius, radius, size=(count, d))
    widths = rng.uniform(0.1, 0.4, size=count) * radius
    weights = rng.exponential(size=count)

    def u0(X):
        X = np.atleast_2d(X)
        out = np.zeros(len(X))
        for c, w, a in zip(centers, widths, weights):
            out += a * np.exp(-((X - c) ** 2).sum(axis=1) / (2 * w * w))
        return out

    return u0


def harnack_ratio(built: dict, R: float = 0.5, trials: int = 20, seed: int = 0,
                  time_points: int = 8, boots: int = 400) -> ExperimentReport:
    """Largest weak Harnack ratio over random nonnegative data, per ``n``.

    Initial data are random sums of Gaussian bumps inside ``B_2R`` (the same
    real functions for every ``n``).  Uniformity in ``n`` is judged with
    :func:`uniformity_slope` on the per-``n`` maxima.
    """
    ns = _check_grid(sorted(built))
    rng = np.random.default_rng(seed)
    d = built[ns[0]].d
    family = [_bump_family(rng, d, 2 * R) for _ in range(trials)]
    per_n = []
    rows = []
    for n in ns:
        dc = built[n]
        if not R > 1.0 / n:
            raise ValueError("need R > sigma/n")
        x0 = LatticePoint.origin(d, n)
        W = Window.cube(n, 2 * R, d)
        L = assemble(dc, W, mode="killed", inner=Ball(x0, 2 * R))
        ratios, excluded = [], 0
        for u0 in family:
            r = harnack_ratio_single(L, L.evaluate(u0), R, x0, time_points)
            if math.isinf(r):
                excluded += 1
            else:
                ratios.append(r)
        ratios = np.asarray(ratios)
        per_n.append(ratios)
        rows.append({"n": n, "max_ratio": float(ratios.max()) if len(ratios) else math.nan,
                     "median_ratio": float(np.median(ratios)) if len(ratios) else math.nan,
                     "excluded": excluded})
    trend = uniformity_slope(ns, per_n, np.max, boots=boots, seed=seed)
    return ExperimentReport("harnack_ratio", ["weak parabolic Harnack inequality uniformly in n"], rows,
                            {"R": R, "trials": trials, "seed": seed, "bound": float(max(r["max_ratio"] for r in rows)),
                             "trend": trend}, trend["passed"])


def survival_exceedance(dc, R: float, A: float, t0, x0=None) -> np.ndarray:
    """``1 - P^{B}_{(t0 R)^alpha} 1 (x0)`` with ``B`` the closed ball of radius ``A R``.

    This is the probability of leaving ``B`` before time ``(t0 R)^alpha``,
    computed with the killed semigroup.
    """
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    n, d = C.n, C.d
    if x0 is None:
        x0 = LatticePoint.origin(d, n)
    ball = Ball(x0, A * R, closed=True)
    W = Window(n, tuple(c - int(math.ceil(A * R * n)) - 1 for c in x0.coords),
               tuple(c + int(math.ceil(A * R * n)) + 1 for c in x0.coords))
    L = assemble(C, W, mode="killed", inner=ball)
    j = int(np.nonzero(np.all(L.coords == np.asarray(x0.coords), axis=1))[0][0])
    one = np.ones(L.size)
    rate = float(L.rates.max(initial=0.0))
    out = [1.0 - semigroup_apply(L, one, (float(t) * R) ** C.alpha, 1e-13, rate)[j] for t in np.atleast_1d(t0)]
    return np.asarray(out)


def survival_threshold(dc, R: float, A: float, B: float, t_hi: float = 4.0, iters: int = 40) -> float:
    """Largest ``t0`` with exceedance ``<= B`` (bisection; exceedance is nondecreasing in ``t0``)."""
    lo, hi = 0.0, t_hi
    if survival_exceedance(dc, R, A, hi)[0] <= B:
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if survival_exceedance(dc, R, A, mid)[0] <= B:
            lo = mid
        else:
            hi = mid
    return lo


def uniformity_slope(ns: Sequence[int], samples: Sequence[np.ndarray], stat: Callable = np.max,
                     boots: int = 400, seed: int = 0, z: float = 3.0) -> dict:
    """Trend of a per-``n`` statistic against ``log n`` with a bootstrap standard error.

    ``samples[k]`` holds the trial values at ``ns[k]``; the statistic (for
    example the maximum over trials) is recomputed on independent bootstrap
    resamples of each ``n``.  The trend passes when ``slope <= z * se``,
    i.e. a growth trend is not statistically detectable.
    """
    x = np.log(np.asarray(ns, dtype=float))
    vals = np.array([stat(np.asarray(s)) for s in samples], dtype=float)
    slope = float(np.polyfit(x, vals, 1)[0])
    rng = np.random.default_rng(seed)
    bs = []
    for _ in range(boots):
        v = [stat(s[rng.integers(0, len(s), len(s))]) if len(s) > 1 else stat(s) for s in map(np.asarray, samples)]
        bs.append(np.polyfit(x, np.asarray(v, float), 1)[0])
    se = float(np.std(bs, ddof=1)) if boots > 1 else 0.0
    return {"values": vals.tolist(), "slope": slope, "se": se, "passed": bool(slope <= z * se + 1e-12),
            "extrapolated_limit": extrapolated_limit(vals[-3:]) if len(vals) >= 3 else math.nan}


def extrapolated_limit(v: Sequence[float]) -> float:
    """Limit of ``v_k = v_inf + c q^k`` from three consecutive values (Aitken's delta-squared).

    Returns ``nan`` when the increments do not shrink geometrically.
    """
    a, b, c = (float(x) for x in v)
    d1, d2 = b - a, c - b
    if d1 == 0 or d2 == 0:
        return c if d2 == 0 else math.nan
    q = d2 / d1
    if not 0 < q < 1:
        return math.nan
    return c + d2 * q / (1 - q)
