"""Monte Carlo simulation of the variable speed random walk.

From state ``x`` the walk waits an exponential time with rate
``2 n^alpha C(x)`` (the rate implied by the generator) and then jumps to
``y`` with probability ``C(x, y) / C(x)``.

Paths are simulated in lockstep blocks of fixed size.  Block ``b`` draws from
``Generator(Philox(SeedSequence(seed, spawn_key=(b,))))``, so results depend
only on ``(seed, paths)`` and not on how blocks are scheduled.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conductance import Conductance, DecomposedConductance
from .lattice import Ball, LatticePoint, Window

__all__ = [
    "McConfig",
    "Trajectory",
    "AliasTable",
    "JumpSampler",
    "simulate",
    "run_paths",
    "exit_time_mc",
    "survival_mc",
    "levy_system_check",
    "fdd_sample",
    "block_rng",
]

BLOCK = 32768


@dataclass
class McConfig:
    seed: int = 0
    paths: int = 10000
    horizon: float = 1.0
    jobs: int = 1
    block: int = BLOCK

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent counter-based stream for path block ``block``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


# ====================================================================== alias sampling
class AliasTable:
    """Vose alias table for a finite distribution."""

    def __init__(self, weights):
        p = np.asarray(weights, dtype=float)
        if p.ndim != 1 or len(p) == 0 or (p < 0).any() or p.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        m = len(p)
        scaled = p * m / p.sum()
        prob = np.ones(m)
        alias = np.arange(m)
        small = [i for i in range(m) if scaled[i] < 1.0]
        large = [i for i in range(m) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        for i in small + large:
            prob[i] = 1.0
        self.prob = prob
        self.alias = alias
        self.m = m

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k = rng.integers(0, self.m, size=size)
        u = rng.random(size)
        return np.where(u < self.prob[k], k, self.alias[k])

    def probabilities(self) -> np.ndarray:
        """Distribution encoded by the table (for verification)."""
        out = self.prob.copy()
        np.add.at(out, self.alias, 1.0 - self.prob)
        return out / self.m


class JumpSampler:
    """Jump rates and jump distributions of the walk.

    Translation-invariant kernels share one alias table.  Otherwise rows are
    tabulated on ``window``; each distinct row pattern gets its own alias
    table (inverse-CDF search is used when there are very many patterns).
    """

    MAX_PATTERNS = 4096

    def __init__(self, c: Conductance | DecomposedConductance, window: Window | None = None):
        C = c.full if isinstance(c, DecomposedConductance) else c
        self.C = C
        self.n, self.d, self.alpha = C.n, C.d, C.alpha
        self.scale = 2.0 * float(self.n) ** self.alpha
        self.window = window
        offs = C.offsets
        if C.translation_invariant:
            w = C._table_vals.copy()
            keep = w > 0
            self.offsets = offs[keep]
            w = w[keep]
            self.invariant = True
            self.row_weights = w[None, :]
            self.total = float(w.sum())
            self.tables = [AliasTable(w)] if len(w) else []
            return
        if window is None:
            raise ValueError("a window is required for position-dependent conductances")
        self.invariant = False
        W = C.weights_at(window.coords())
        if (W < 0).any():
            raise ValueError("negative conductance")
        used = W.any(axis=0)
        self.offsets = offs[used]
        W = W[:, used]
        self.row_weights = W
        self.totals = W.sum(axis=1)
        pats, inv = np.unique(W, axis=0, return_inverse=True)
        self.pattern = np.asarray(inv).reshape(-1)
        if len(pats) <= self.MAX_PATTERNS:
            self.tables = [AliasTable(p) if p.sum() > 0 else None for p in pats]
            self.cdf = None
        else:
            self.tables = None
            tot = np.where(self.totals > 0, self.totals, 1.0)
            self.cdf = np.cumsum(W / tot[:, None], axis=1)

    # -------------------------------------------------------------- queries
    def state_index(self, pos: np.ndarray) -> np.ndarray:
        if self.invariant:
            return np.zeros(len(pos), dtype=np.int64)
        return self.window.index_of(pos)

    def rates(self, idx: np.ndarray) -> np.ndarray:
        """Total jump rates ``2 n^alpha C(x)``."""
        if self.invariant:
            return np.full(len(idx), self.scale * self.total)
        return self.scale * self.totals[idx]

    def jump_rate_function(self, f: Callable, pos: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """``2 n^alpha sum_y f(x, y) C(x, y)`` at each position (real coordinates passed to ``f``)."""
        out = np.zeros(len(pos))
        Wt = self.row_weights
        for k, h in enumerate(self.offsets):
            w = Wt[0, k] if self.invariant else Wt[idx, k]
            out += np.asarray(f(pos / self.n, (pos + h) / self.n), dtype=float) * w
        return self.scale * out

    def sample(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sampled displacement rows (lattice units) for states ``idx``."""
        size = len(idx)
        if self.invariant:
            return self.offsets[self.tables[0].sample(rng, size)]
        if self.cdf is not None:
            u = rng.random(size)
            k = (self.cdf[idx] < u[:, None]).sum(axis=1)
            k = np.minimum(k, len(self.offsets) - 1)
            return self.offsets[k]
        pat = self.pattern[idx]
        out = np.zeros((size, self.d), dtype=np.int64)
        for p in np.unique(pat):
            sel = np.nonzero(pat == p)[0]
            tab = self.tables[p]
            out[sel] = self.offsets[tab.sample(rng, len(sel))]
        return out

    def jump_probabilities(self, x) -> np.ndarray:
        """``C(x, .)/C(x)`` over :attr:`offsets` for one state."""
        x = np.asarray(getattr(x, "coords", x), dtype=np.int64)[None, :]
        w = self.row_weights[0] if self.invariant else self.row_weights[self.state_index(x)[0]]
        return w / w.sum()


# ====================================================================== engine
@dataclass
class _BlockResult:
    final: np.ndarray
    exit_time: np.ndarray
    jumps: np.ndarray
    records: np.ndarray | None
    stat: np.ndarray | None
    comp: np.ndarray | None
    escaped: int


def _run_block(sampler: JumpSampler, start: np.ndarray, size: int, horizon: float,
               rng: np.random.Generator, exit_ball: Ball | None, times: np.ndarray | None,
               stat: Callable | None) -> _BlockResult:
    d = sampler.d
    n = sampler.n
    pos = np.tile(np.asarray(start, dtype=np.int64), (size, 1))
    t = np.zeros(size)
    exit_time = np.full(size, np.inf)
    jumps = np.zeros(size, dtype=np.int64)
    active = np.ones(size, dtype=bool)
    escaped = 0
    rec = None
    rp = None
    if times is not None:
        rec = np.zeros((size, len(times), d), dtype=np.int64)
        rp = np.zeros(size, dtype=np.int64)
    s_acc = np.zeros(size) if stat is not None else None
    c_acc = np.zeros(size) if stat is not None else None
    if exit_ball is not None:
        inside = exit_ball.contains_coords(pos)
        exit_time[~inside] = 0.0
        active &= inside
    ia = np.nonzero(active)[0]
    while len(ia):
        idx = sampler.state_index(pos[ia])
        bad = idx < 0
        if bad.any():
            escaped += int(bad.sum())
            active[ia[bad]] = False
            ia = ia[~bad]
            idx = idx[~bad]
            if not len(ia):
                break
        rate = sampler.rates(idx)
        with np.errstate(divide="ignore"):
            dt = np.where(rate > 0, rng.standard_exponential(len(ia)) / np.where(rate > 0, rate, 1.0), np.inf)
        tn = t[ia] + dt
        if rec is not None:
            while True:
                ptr = rp[ia]
                m = ptr < len(times)
                m[m] = times[ptr[m]] < tn[m]
                if not m.any():
                    break
                sel = ia[m]
                rec[sel, rp[sel]] = pos[sel]
                rp[sel] += 1
        done = tn > horizon
        if stat is not None:
            g = sampler.jump_rate_function(stat, pos[ia], idx)
            c_acc[ia] += g * np.where(done, horizon - t[ia], dt)
        fin = ia[done]
        t[fin] = horizon
        active[fin] = False
        go = ~done
        jp = ia[go]
        if len(jp):
            step = sampler.sample(idx[go], rng)
            new = pos[jp] + step
            if stat is not None:
                s_acc[jp] += np.asarray(stat(pos[jp] / n, new / n), dtype=float)
            pos[jp] = new
            t[jp] = tn[go]
            jumps[jp] += 1
            if exit_ball is not None:
                out = ~exit_ball.contains_coords(new)
                if out.any():
                    ex = jp[out]
                    exit_time[ex] = t[ex]
                    active[ex] = False
        ia = np.nonzero(active)[0]
    if rec is not None:
        for j in range(len(times)):
            left = rp <= j
            rec[left, j] = pos[left]
    return _BlockResult(pos, exit_time, jumps, rec, s_acc, c_acc, escaped)


def run_paths(sampler: JumpSampler, start, cfg: McConfig, *, exit_ball: Ball | None = None,
              times: Sequence[float] | None = None, stat: Callable | None = None) -> dict:
    """Simulate ``cfg.paths`` independent paths from ``start`` up to ``cfg.horizon``.

    Returns a dict with ``final`` positions (lattice units), ``exit_time``
    (``inf`` when no exit before the horizon), ``jumps``, optional ``records``
    at ``times`` and, when ``stat`` is given, per-path jump sums ``stat_sum``
    and compensators ``compensator``.
    """
    start = np.asarray(getattr(start, "coords", start), dtype=np.int64)
    tarr = None if times is None else np.asarray(times, dtype=float)
    if tarr is not None and (np.any(np.diff(tarr) < 0) or (len(tarr) and tarr[-1] > cfg.horizon)):
        raise ValueError("times must be increasing and within the horizon")
    sizes = [min(cfg.block, cfg.paths - b * cfg.block) for b in range(-(-cfg.paths // cfg.block))]

    def work(b):
        return _run_block(sampler, start, sizes[b], cfg.horizon, block_rng(cfg.seed, b), exit_ball, tarr, stat)

    if cfg.jobs > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(cfg.jobs) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(b) for b in range(len(sizes))]
    out = {
        "final": np.concatenate([p.final for p in parts]),
        "exit_time": np.concatenate([p.exit_time for p in parts]),
        "jumps": np.concatenate([p.jumps for p in parts]),
        "escaped": sum(p.escaped for p in parts),
        "seed": cfg.seed,
        "paths": cfg.paths,
    }
    if tarr is not None:
        out["records"] = np.concatenate([p.records for p in parts])
    if stat is not None:
        out["stat_sum"] = np.concatenate([p.stat for p in parts])
        out["compensator"] = np.concatenate([p.comp for p in parts])
    return out


def _auto_window(c: Conductance, center: np.ndarray, radius: float) -> Window | None:
    if c.translation_invariant:
        return None
    k = int(math.ceil(radius * c.n)) + int(math.ceil(c.reach())) + 1
    return Window(c.n, tuple(center - k), tuple(center + k))


def _sampler(dc, start, radius, window):
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    if window is None:
        window = _auto_window(C, np.asarray(getattr(start, "coords", start)), radius)
    return JumpSampler(C, window)


# ====================================================================== single trajectories
@dataclass
class Trajectory:
    start: LatticePoint
    events: list = field(default_factory=list)
    horizon: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.start.dim
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)])
        w.writerow([0.0] + list(self.start.coords))
        for t, p in self.events:
            w.writerow([repr(t)] + list(p.coords))
        return buf.getvalue()

    def position(self, t: float) -> LatticePoint:
        cur = self.start
        for s, p in self.events:
            if s > t:
                break
            cur = p
        return cur


def simulate(dc, start: LatticePoint, cfg: McConfig, window: Window | None = None, path: int = 0) -> Trajectory:
    """One trajectory up to ``cfg.horizon`` (path ``path`` of the seed's stream)."""
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    sampler = JumpSampler(C, window if window is not None or C.translation_invariant
                          else _auto_window(C, np.asarray(start.coords), 1.0))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(10 ** 9, path))))
    pos = np.asarray(start.coords, dtype=np.int64)[None, :]
    t = 0.0
    events = []
    while True:
        idx = sampler.state_index(pos)
        if idx[0] < 0:
            warnings.warn("trajectory left the tabulated window; stopping")
            break
        rate = float(sampler.rates(idx)[0])
        if rate <= 0:
            break
        t += float(rng.standard_exponential()) / rate
        if t > cfg.horizon:
            break
        pos = pos + sampler.sample(idx, rng)
        events.append((t, LatticePoint(tuple(int(v) for v in pos[0]), start.scale)))
    return Trajectory(start, events, cfg.horizon)


# ====================================================================== estimators
def _mean_ci(x: np.ndarray) -> dict:
    x = np.asarray(x, dtype=float)
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf
    return {"mean": m, "se": se, "ci": (m - 1.96 * se, m + 1.96 * se)}


def exit_time_mc(dc, ball: Ball, start: LatticePoint, cfg: McConfig, window: Window | None = None) -> dict:
    """Monte Carlo mean of the exit time from ``ball`` (jumps over the boundary count as exits)."""
    if start not in ball:
        raise ValueError("start must lie in the ball")
    sampler = _sampler(dc, start, ball.radius, window)
    res = run_paths(sampler, start, cfg, exit_ball=ball)
    tau = res["exit_time"]
    censored = ~np.isfinite(tau)
    frac = float(censored.mean())
    tau = np.where(censored, cfg.horizon, tau)
    out = _mean_ci(tau)
    out.update({"censored_fraction": frac, "paths": cfg.paths, "seed": cfg.seed})
    if frac > 0.01:
        warnings.warn(f"{frac:.1%} of paths hit the horizon; mean is biased low")
        out["se"] *= 2
        out["ci"] = (out["mean"] - 3.92 * out["se"] / 2, out["mean"] + 3.92 * out["se"] / 2)
    if res["escaped"]:
        out["escaped"] = res["escaped"]
    return out


def survival_mc(dc, R: float, A: float, t0_grid: Sequence[float], cfg: McConfig,
                start: LatticePoint | None = None, targets: Sequence[float] = (0.1, 0.25, 0.5),
                window: Window | None = None) -> dict:
    """Exceedance probabilities ``P(sup_{t <= (t0 R)^alpha} |X_t - x| > A R)``.

    One simulation up to the largest horizon serves every ``t0``.  For each
    target ``B`` the largest grid value ``t0`` whose upper confidence bound
    stays below ``B`` is reported as ``t0_for[B]``.
    """
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    if not R <= 1 or A <= 0:
        raise ValueError("need R <= 1 and A > 0")
    if start is None:
        start = LatticePoint.origin(C.d, C.n)
    grid = np.sort(np.asarray(t0_grid, dtype=float))
    horizons = (grid * R) ** C.alpha
    ball = Ball(start, A * R, closed=True)
    sampler = _sampler(dc, start, A * R, window)
    local = McConfig(cfg.seed, cfg.paths, float(horizons.max()), cfg.jobs, cfg.block)
    res = run_paths(sampler, start, local, exit_ball=ball)
    tau = res["exit_time"]
    p, se = [], []
    for h in horizons:
        q = float(np.mean(tau <= h))
        p.append(q)
        se.append(math.sqrt(max(q * (1 - q), 1.0 / cfg.paths) / cfg.paths))
    t0_for = {}
    for B in targets:
        ok = [g for g, q, s in zip(grid, p, se) if q + 3 * s <= B]
        t0_for[float(B)] = float(max(ok)) if ok else 0.0
    return {"t0": grid.tolist(), "horizon": horizons.tolist(), "exceedance": p, "se": se,
            "t0_for": t0_for, "R": R, "A": A, "paths": cfg.paths, "seed": cfg.seed}


def levy_system_check(dc, f: Callable, T: float, cfg: McConfig, start: LatticePoint | None = None,
                      window: Window | None = None) -> dict:
    """Compare ``E sum_{jumps} f(X_-, X)`` with ``E int_0^T 2 n^alpha sum_y f(X_t, y) C(X_t, y) dt``.

    ``f`` is vectorised over real coordinates ``f(X, Y)``.
    """
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    if start is None:
        start = LatticePoint.origin(C.d, C.n)
    sampler = _sampler(dc, start, 4.0, window)
    res = run_paths(sampler, start, McConfig(cfg.seed, cfg.paths, T, cfg.jobs, cfg.block), stat=f)
    s = res["stat_sum"]
    c = res["compensator"]
    lhs = _mean_ci(s)
    rhs = _mean_ci(c)
    diff = _mean_ci(s - c)
    passed = abs(diff["mean"]) <= 3 * diff["se"] + 1e-12
    return {"jumps_side": lhs, "compensator_side": rhs, "difference": diff, "passed": bool(passed),
            "T": T, "paths": cfg.paths, "seed": cfg.seed}


def fdd_sample(dc, start: LatticePoint, times: Sequence[float], cfg: McConfig,
               window: Window | None = None) -> np.ndarray:
    """Positions (real units) of every path at the given times, shape ``(paths, len(times), d)``."""
    times = np.asarray(times, dtype=float)
    C = dc.full if isinstance(dc, DecomposedConductance) else dc
    if window is None and not C.translation_invariant:
        raise ValueError("pass a window large enough to contain the paths")
    sampler = JumpSampler(C, window)
    res = run_paths(sampler, start, McConfig(cfg.seed, cfg.paths, float(times.max(initial=0.0)), cfg.jobs,
                                             cfg.block), times=times)
    if res["escaped"]:
        warnings.warn(f"{res['escaped']} paths left the window")
    return res["records"] / C.n
