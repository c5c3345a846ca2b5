"""Config-driven command line runner.

Usage::

    nonsym <command> --config <path> [--jobs N] [--out DIR]

The config is YAML with a ``schema`` field (currently ``1``).  Randomness is
derived from the single root ``seed``: the stream for experiment key ``k``
(for example the index of ``n`` in ``n_grid``) uses
``SeedSequence(seed, spawn_key=(k,))``, and chain simulations then split that
stream into blocks as described in :mod:`nonsym.chain`.

Exit status: 0 when every asserted check passes, 1 when some check fails,
2 for configuration or model errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .builders import (DiffusionTarget, build_local, build_nonlocal, example_stable_conductance,
                       make_target, verify_target_convergence)
from .chain import McConfig, exit_time_mc, fdd_sample
from .conductance import (DecomposedConductance, _json_default, check_ctail, check_k1, check_k2,
                          check_nnrw, decompose, nearest_neighbor)
from .convergence import (ExperimentReport, drift_benchmark, harnack_ratio, holder_modulus,
                          resolvent_cauchy, stable_benchmark, survival_exceedance)
from .lattice import Ball, LatticePoint, Window
from .operators import assemble, green_vector

SCHEMA_VERSION = 1
COMMANDS = ("build", "check", "simulate", "exit-times", "resolvent", "converge-local",
            "converge-stable", "regularity")
MODELS = ("nearest_neighbor", "local_diffusion", "nonlocal", "example_stable")


class ConfigError(ValueError):
    pass


# ====================================================================== config
DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "model": {"name": "nearest_neighbor", "params": {}},
    "n_grid": [32],
    "theta": "inf",
    "window": {"radius": 1.0},
    "seed": 0,
    "paths": 10000,
    "tolerances": {},
    "experiment": {},
}


def load_config(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    cfg = {**DEFAULTS, **raw}
    if cfg["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {cfg['schema']!r} (expected {SCHEMA_VERSION})")
    ns = cfg["n_grid"]
    if not isinstance(ns, list) or not ns or not all(isinstance(v, int) and v >= 1 for v in ns):
        raise ConfigError("n_grid must be a nonempty list of positive integers")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ConfigError("n_grid must be strictly increasing")
    for k, v in cfg["tolerances"].items():
        if not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"tolerance {k!r} must be positive")
    if not isinstance(cfg["paths"], int) or cfg["paths"] < 1:
        raise ConfigError("paths must be a positive integer")
    model = cfg["model"]
    if not isinstance(model, dict) or model.get("name") not in MODELS:
        raise ConfigError(f"unknown model {model.get('name') if isinstance(model, dict) else model!r}; "
                          f"known: {list(MODELS)}")
    cfg["theta"] = math.inf if str(cfg["theta"]).lower() in ("inf", "infinity") else float(cfg["theta"])
    return cfg


def derive_seed(root: int, *keys: int) -> int:
    """Seed of the child stream ``keys`` of the root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _target_from(spec):
    if isinstance(spec, dict):
        return make_target(spec["name"], *spec.get("args", []), **spec.get("kwargs", {}))
    return make_target(spec)


def build_model(cfg: dict, n: int) -> tuple[DecomposedConductance, Window, dict]:
    """Conductance, working window and model metadata at scale ``n``."""
    name = cfg["model"]["name"]
    p = dict(cfg["model"].get("params") or {})
    radius = float(cfg["window"].get("radius", 1.0))
    d = int(p.get("d", 1))
    try:
        if name == "nearest_neighbor":
            w = p.get("weight", 0.5)
            c = nearest_neighbor(n, d, weight=w, alpha=float(p.get("alpha", 2.0)))
            return decompose(c), Window.cube(n, radius, d), {"d": d}
        if name == "local_diffusion":
            a, b = _target_from(p["a"]), _target_from(p["b"])
            tgt = DiffusionTarget(a, b, d=d, theta=cfg["theta"], beta_cell=float(p.get("beta_cell", 0.5)),
                                  eps0=float(p.get("eps0", 0.05)))
            win = Window.cube(n, radius, d)
            return build_local(tgt, n, win), win, {"d": d, "target": tgt}
        if name == "nonlocal":
            tgt = _target_from(p["kernel"])
            c = build_nonlocal(tgt, n, float(p.get("range_cut", 4.0)), cell_scale=float(p.get("cell_scale", 1.0)))
            return decompose(c), Window.cube(n, radius, tgt.d), {"d": tgt.d, "target": tgt}
        if name == "example_stable":
            dc = example_stable_conductance(n, float(p["alpha"]), float(p["beta"]), float(p["gamma"]),
                                            M1=float(p.get("M1", 1.0)), M2=float(p.get("M2", 0.5)), d=d,
                                            range_cut=float(p.get("range_cut", 4.0)))
            return dc, Window.cube(n, radius, d), {"d": d}
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown model {name!r}")


# ====================================================================== commands
def _per_n(cfg, jobs, fn):
    ns = cfg["n_grid"]
    if jobs > 1 and len(ns) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, range(len(ns)), ns))
    return [fn(i, n) for i, n in enumerate(ns)]


def cmd_build(cfg, jobs):
    files = {}

    def one(i, n):
        dc, win, _ = build_model(cfg, n)
        return n, dc, win

    rows = []
    for n, dc, win in _per_n(cfg, jobs, one):
        files[f"conductance_n{n}.txt"] = dc.full.to_text(win)
        X = np.zeros((1, dc.d), dtype=np.int64)
        rows.append({"n": n, "offsets": int(dc.full.num_offsets),
                     "rate_at_origin": float(2 * float(n) ** dc.alpha * dc.full.weights_at(X).sum())})
    return ExperimentReport("build", ["conductance construction"], rows, {}, True), files


def cmd_check(cfg, jobs):
    tol = cfg["tolerances"]
    ex = cfg["experiment"]
    radii = ex.get("radii", [0.25, 0.5])
    D = tol.get("D")

    def one(i, n):
        dc, win, _ = build_model(cfg, n)
        reps = [check_k1(dc, cfg["theta"], win), check_k2(dc, win, D=D),
                check_ctail(dc, radii, win), check_nnrw(dc, win)]
        return n, reps

    rows, failures = [], []
    for n, reps in _per_n(cfg, jobs, one):
        for r in reps:
            rows.append({"n": n, "assumption": r.assumption_id, "passed": r.passed,
                         "constants": r.constants_found})
            if not r.passed:
                failures.append(f"{r.assumption_id} at n={n}")
    return ExperimentReport("check", ["structural assumptions on the conductances"], rows,
                            {"failures": failures}, not failures), {}


def cmd_simulate(cfg, jobs):
    ex = cfg["experiment"]
    times = [float(t) for t in ex.get("times", [0.1])]
    rows, files = [], {}
    for i, n in enumerate(cfg["n_grid"]):
        dc, win, meta = build_model(cfg, n)
        d = meta["d"]
        mc = McConfig(derive_seed(cfg["seed"], i), cfg["paths"], max(times), jobs)
        X = fdd_sample(dc, LatticePoint.origin(d, n), times, mc, window=None if dc.full.translation_invariant else win)
        for k, t in enumerate(times):
            rows.append({"n": n, "t": t, "mean": X[:, k, :].mean(axis=0).tolist(),
                         "var": X[:, k, :].var(axis=0, ddof=1).tolist(), "seed": mc.seed})
        files[f"samples_n{n}.csv"] = _samples_csv(X, times)
    return ExperimentReport("simulate", ["finite-dimensional marginals of the chain"], rows,
                            {"times": times}, True), files


def _samples_csv(X, times):
    d = X.shape[2]
    head = ",".join(f"t{k}_x{j + 1}" for k in range(len(times)) for j in range(d))
    body = "\n".join(",".join(repr(float(v)) for v in row.ravel()) for row in X)
    return head + "\n" + body + "\n"


def cmd_exit_times(cfg, jobs):
    ex = cfg["experiment"]
    R = float(ex.get("R", 0.5))
    horizon = float(ex.get("horizon", 10.0))
    rows, failures = [], []
    for i, n in enumerate(cfg["n_grid"]):
        dc, _, meta = build_model(cfg, n)
        d = meta["d"]
        x0 = LatticePoint.origin(d, n)
        ball = Ball(x0, R)
        k = int(math.ceil(R * n)) + 1
        win = Window(n, (-k,) * d, (k,) * d)
        L = assemble(dc, win, mode="killed", inner=ball)
        g = green_vector(L)
        j = int(np.nonzero(np.all(L.coords == 0, axis=1))[0][0])
        mc = McConfig(derive_seed(cfg["seed"], i), cfg["paths"], horizon, jobs)
        est = exit_time_mc(dc, ball, x0, mc)
        agree = abs(est["mean"] - g[j]) <= 3 * est["se"]
        rows.append({"n": n, "R": R, "green": float(g[j]), "mc_mean": est["mean"], "mc_se": est["se"],
                     "agree": bool(agree), "seed": mc.seed})
        if not agree:
            failures.append(f"exit time mismatch at n={n}")
    return ExperimentReport("exit_times", ["mean exit time from balls"], rows,
                            {"failures": failures}, not failures), {}


def _bump(kind):
    if kind == "triangle":
        return lambda X: np.maximum(0.0, 1.0 - 2.0 * np.sqrt((np.atleast_2d(X) ** 2).sum(axis=1)))
    if kind == "gaussian":
        return lambda X: np.exp(-8.0 * (np.atleast_2d(X) ** 2).sum(axis=1))
    raise ConfigError(f"unknown test function {kind!r}")


def cmd_resolvent(cfg, jobs):
    ex = cfg["experiment"]
    lam = float(ex.get("lambda", 2.0))
    f = _bump(ex.get("f", "triangle"))
    built = dict(zip(cfg["n_grid"], _per_n(cfg, jobs, lambda i, n: build_model(cfg, n)[0])))
    d = built[cfg["n_grid"][0]].d
    if d != 1:
        raise ConfigError("the resolvent experiment evaluates on a 1-d compact")
    K = np.linspace(-1.0, 1.0, int(ex.get("points", 41)))[:, None]
    oracle = None
    if "oracle_n" in ex:
        oracle = build_model(cfg, int(ex["oracle_n"]))[0]
    rep = resolvent_cauchy(built, f, lam, K, radius=float(ex.get("radius", 6.0)), oracle=oracle)
    return rep, {}


def cmd_converge_local(cfg, jobs):
    if cfg["model"]["name"] != "local_diffusion":
        raise ConfigError("converge-local needs the local_diffusion model")
    ex = cfg["experiment"]
    ns = cfg["n_grid"]
    lo, hi = ex.get("K", [0.0, 1.0])
    tgt = build_model(cfg, ns[0])[2]["target"]
    field = {}
    for n in ns:
        win = Window(n, (int(math.floor(lo * n)) - 2,) * tgt.d, (int(math.ceil(hi * n)) + 2,) * tgt.d)
        field[n] = build_local(tgt, n, win)
    conv = verify_target_convergence(field, tgt, (lo, hi))
    rows = [{"n": n, "F_distance": f, "B_distance": b}
            for n, f, b in zip(ns, conv["F_distance"], conv["B_distance"])]
    summary = {"F_rate": conv["F_rate"], "B_rate": conv["B_rate"]}
    passed = True
    if "t" in ex:
        t = float(ex["t"])
        nmax = ns[-1]
        win = Window.cube(nmax, float(cfg["window"].get("radius", 4.0)), tgt.d)
        dc = build_local(tgt, nmax, win)
        b = np.asarray(tgt.b(np.zeros((1, tgt.d)))).reshape(-1)
        mc = McConfig(derive_seed(cfg["seed"], len(ns)), cfg["paths"], t, jobs)
        drift = drift_benchmark({nmax: dc}, b, t, mc, eps0=tgt.eps0, windows={nmax: win})
        summary["drift"] = drift.rows[-1]
        passed = bool(drift.passed)
    return ExperimentReport("converge_local", ["coefficient recovery", "drift diffusion limit"], rows,
                            summary, passed), {}


def cmd_converge_stable(cfg, jobs):
    ex = cfg["experiment"]
    n = cfg["n_grid"][-1]
    dc = build_model(cfg, n)[0]
    mc = McConfig(derive_seed(cfg["seed"], 0), cfg["paths"], 1.0, jobs)
    rep = stable_benchmark(dc, mc, s=float(ex.get("s", 0.5)), t_small=float(ex.get("t_small", 0.01)),
                           t_pair=tuple(ex.get("t_pair", (0.1, 0.2))))
    return rep, {}


def cmd_regularity(cfg, jobs):
    ex = cfg["experiment"]
    R = float(ex.get("R", 0.5))
    ns = cfg["n_grid"]
    built = dict(zip(ns, _per_n(cfg, jobs, lambda i, n: build_model(cfg, n)[0])))
    d = built[ns[0]].d
    harn = harnack_ratio(built, R=R, trials=int(ex.get("trials", 20)), seed=derive_seed(cfg["seed"], 0))
    Ls = {n: assemble(built[n], Window.cube(n, float(ex.get("holder_radius", 3.0)), d), mode="killed")
          for n in ns}
    hold = holder_modulus(Ls, _bump("gaussian"), float(ex.get("t", 0.1)), ex.get("h_grid", [0.125, 0.25, 0.5]))
    A = float(ex.get("A", 1.0))
    t0 = float(ex.get("t0", 0.5))
    surv = [float(survival_exceedance(built[n], R, A, t0)[0]) for n in ns]
    rows = [{"n": n, "harnack_max": hr["max_ratio"], "holder_gamma": hh["gamma"], "exceedance": s}
            for n, hr, hh, s in zip(ns, harn.rows, hold.rows, surv)]
    summary = {"harnack": harn.summary, "holder": hold.summary, "survival_t0": t0, "A": A, "R": R}
    passed = bool(harn.passed and hold.passed)
    return ExperimentReport("regularity", ["weak parabolic Harnack inequality", "Hölder continuity",
                                           "survival estimate"], rows, summary, passed), {}


HANDLERS = {
    "build": cmd_build,
    "check": cmd_check,
    "simulate": cmd_simulate,
    "exit-times": cmd_exit_times,
    "resolvent": cmd_resolvent,
    "converge-local": cmd_converge_local,
    "converge-stable": cmd_converge_stable,
    "regularity": cmd_regularity,
}


# ====================================================================== entry point
def _write_outputs(out: Path, command: str, cfg: dict, cfg_text: bytes, report: ExperimentReport,
                   files: dict) -> list:
    out.mkdir(parents=True, exist_ok=True)
    report.config = {k: v for k, v in cfg.items()}
    written = {}
    stem = command.replace("-", "_")
    written[f"{stem}.csv"] = report.to_csv()
    written[f"{stem}.json"] = report.to_json() + "\n"
    written.update(files)
    for name in sorted(written):
        (out / name).write_text(written[name])
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(cfg_text).hexdigest(),
        "seed": cfg["seed"],
        "seed_rule": "SeedSequence(seed, spawn_key=(k,)) for experiment key k",
        "anchors": report.anchors,
        "passed": report.passed,
        "files": sorted(written),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return sorted(written)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nonsym", description="Lattice approximation experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="nonsym_out")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        report, files = HANDLERS[args.command](cfg, max(1, args.jobs))
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg_text = Path(args.config).read_bytes()
    _write_outputs(Path(args.out), args.command, cfg, cfg_text, report, files)
    if report.passed is False:
        fails = report.summary.get("failures") or [report.name]
        print("failed checks: " + ", ".join(fails), file=sys.stderr)
        return 1
    print(f"{args.command}: ok ({args.out})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
