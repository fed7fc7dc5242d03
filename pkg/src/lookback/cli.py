"""Batch experiment runner.

Each subcommand reads a JSON configuration, validates every referenced
parameter before running anything, and writes plot-ready CSV/JSON artifacts
into the output directory.  Every artifact starts with (CSV) or contains
(JSON) the toolkit version and the fully resolved configuration.

Exit status: 0 success, 2 configuration error, 3 runtime cap exceeded,
4 invariant violation (the state is dumped to ``invariant_violation.json``).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import multiprocessing as mp
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .certifier import (
    certify_convergence_schedule,
    construct_divergence,
    series_dichotomy,
)
from .engine import (
    InvariantViolation,
    ProcessTrace,
    TraceCapacityError,
    default_n_max,
    load_init,
    run_schedule,
)
from .envelope import ConstantsLedger, EnvelopeParams
from .renewal import (
    discretize,
    log_moment_report,
    overshoot_law,
    probe_function,
    renewal_identity_check,
    run_fixed_shape,
    shape_from_config,
    simulate_overshoot,
    strong_discretization_check,
    verify_limit_formula,
)

__all__ = ["ConfigError", "main", "run"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAP = 3
EXIT_INVARIANT = 4
SCHEMA_VERSION = 1
KINDS = ("simulate", "diverge", "certify", "series", "renewal", "sweep")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# serialization helpers

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _dumps(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _header(resolved):
    return [f"lookback {__version__}",
            "config: " + json.dumps(_jsonable(resolved), sort_keys=True)]


class Artifacts:
    """Files produced by a run, written atomically only on success."""

    def __init__(self, resolved):
        self.resolved = resolved
        self.files = {}

    @property
    def header(self):
        return _header(self.resolved)

    def csv_text(self, name, text):
        self.files[name] = text

    def json(self, name, payload):
        body = {"lookback_version": __version__, "config": self.resolved}
        body.update(payload)
        self.files[name] = _dumps(body)

    def commit(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            _atomic_write(out / name, text)


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_csv(header_lines, columns, rows):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    return v


# ---------------------------------------------------------------------------
# configuration

def load_config(path):
    """Read and minimally check a JSON configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    schema = cfg.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {schema!r}")
    return cfg


def _cap(value):
    """Apply the global cap from ``LOOKBACK_N_MAX``."""
    if value is None:
        return default_n_max()
    value = int(value)
    if os.environ.get("LOOKBACK_N_MAX"):
        value = min(value, default_n_max())
    return value


def _int(cfg, key, default=None, lo=None):
    v = cfg.get(key, default)
    if v is None:
        raise ConfigError(f"missing required key {key!r}")
    try:
        iv = int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key!r} must be an integer, got {v!r}") from None
    if iv != v and not (isinstance(v, float) and v.is_integer()):
        raise ConfigError(f"{key!r} must be an integer, got {v!r}")
    if lo is not None and iv < lo:
        raise ConfigError(f"{key!r} must be >= {lo}, got {iv}")
    return iv


def _envelope(cfg):
    if "envelope" not in cfg:
        raise ConfigError("missing 'envelope' block")
    try:
        return EnvelopeParams.from_dict(cfg["envelope"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid envelope: {exc}") from None


def _ledger(cfg):
    try:
        return ConstantsLedger.from_dict(cfg.get("constants", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid constants: {exc}") from None


def _shape(cfg):
    try:
        return shape_from_config(cfg.get("shape"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid shape: {exc}") from None


def _init(cfg):
    if "init" not in cfg:
        raise ConfigError("missing 'init'")
    try:
        init = load_init(cfg["init"])
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid init: {exc}") from None
    arr = np.asarray(init, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError("init must be a non-empty list of finite numbers")
    return arr


# ---------------------------------------------------------------------------
# jobs: each planner validates and returns a zero-argument runner

def _plan_simulate(cfg):
    init = _init(cfg)
    N = _int(cfg, "N", lo=init.size)
    n_max = _cap(cfg.get("n_max"))
    policy = cfg.get("policy", "uniform")
    seed = _int(cfg, "seed", 0)
    if policy in ("extremal_max", "extremal_min", "interval"):
        params = _envelope(cfg)
        if init.size < params.n_min:
            raise ConfigError(f"init length {init.size} precedes n_min={params.n_min}")
        lam = cfg.get("lambda", 0.5)
        if policy == "interval" and lam != "iid":
            try:
                lam = float(lam)
            except (TypeError, ValueError):
                raise ConfigError("'lambda' must be a number in [0, 1] or 'iid'") from None
            if not 0 <= lam <= 1:
                raise ConfigError("'lambda' must lie in [0, 1]")
    elif policy == "shape":
        shape = _shape(cfg)
    elif policy != "uniform":
        raise ConfigError(f"unknown policy {policy!r}")

    def job(art):
        if policy == "shape":
            res = run_fixed_shape(shape, init, N, n_max=n_max)
            tr = res.trace
            extra = res.to_dict()
        else:
            tr = ProcessTrace(init, n_max=n_max, seed=seed)
            if N > n_max:
                raise TraceCapacityError(f"N={N} exceeds n_max={n_max}")
            extra = {}
            if policy == "uniform":
                for _ in range(N - init.size):
                    tr.append(tr.mean)
            else:
                ns = np.arange(init.size, N, dtype=np.float64)
                eps, delta = params.eps_array(ns), params.delta_array(ns)
                if policy == "extremal_max":
                    lam_arr = 1.0
                elif policy == "extremal_min":
                    lam_arr = 0.0
                elif lam == "iid":
                    lam_arr = np.random.default_rng(seed).random(ns.size)
                else:
                    lam_arr = lam
                run_schedule(tr, eps, delta, lam_arr)
        art.csv_text("trace.csv", tr.to_csv(header_lines=art.header))
        v = tr.values
        art.json("summary.json", dict(extra, N=int(tr.n), final_term=float(v[-1]),
                                      final_mean=float(tr.mean)))
    return job


def _plan_diverge(cfg):
    params = _envelope(cfg)
    ledger = _ledger(cfg)
    k = _int(cfg, "k", lo=1)
    T_max = _int(cfg, "T_max", 100, lo=1)
    n_max = _cap(cfg.get("n_max", 10**6))
    tail = _int(cfg, "tail_stages", 10**6, lo=0)
    if k > n_max:
        raise ConfigError(f"k={k} exceeds n_max={n_max}")

    def job(art):
        try:
            rec, _ = construct_divergence(params, ledger, k, T_max, n_max=n_max,
                                       tail_stages=tail)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        art.csv_text("stages.csv", rec.to_csv(header_lines=art.header))
        art.json("summary.json", dict(rec.to_dict(), partial_sum=math.fsum(rec.term)))
        if not rec.invariants_hold:
            raise InvariantViolation("stage invariant failed", {"record": rec.to_dict()})
    return job


def _plan_certify(cfg):
    params = _envelope(cfg)
    ledger = _ledger(cfg)
    T_max = _int(cfg, "T_max", 100, lo=1)
    k = cfg.get("k")
    k = None if k is None else _int(cfg, "k", lo=1)
    n_max = _cap(cfg.get("n_max", 10**6))
    lam = cfg.get("lam", "alternating")
    seed = _int(cfg, "seed", 0)

    def job(art):
        try:
            sched = certify_convergence_schedule(params, ledger, T_max, k=k, n_max=n_max,
                                                 lam=lam, seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        art.csv_text("stages.csv", sched.to_csv(header_lines=art.header))
        c = sched.c_empirical[np.isfinite(sched.c_empirical)]
        art.json("summary.json", {
            "stages": int(sched.T.size), "simulated_until": int(sched.simulated_until),
            "contained": sched.contained, "nested": bool(sched.nested),
            "contraction_ok": bool(sched.contraction_ok()),
            "final_gap": float(sched.gap[-1]), "partial_sum": float(np.sum(sched.term)),
            "c_empirical_max": float(c.max()) if c.size else None,
            "regime_warning": sched.regime_warning, "terminated": sched.terminated,
        })
        if sched.contained is False:
            raise InvariantViolation("simulated trace left the certified interval",
                                     {"records": list(itertools.islice(sched.records(), 1000))})
    return job


def _plan_series(cfg):
    params = _envelope(cfg)
    ledger = _ledger(cfg)
    T_max = _int(cfg, "T_max", 10**6, lo=2)
    T0 = _int(cfg, "T0", min(1000, T_max // 2), lo=1)
    if T0 >= T_max:
        raise ConfigError("T0 must be below T_max")
    n_0 = cfg.get("n_0")
    log_n0 = cfg.get("log_n0")
    stride = _int(cfg, "csv_stride", max(1, T_max // 10000), lo=1)
    checkpoints = tuple(sorted({int(c) for c in cfg.get("checkpoints", (T0,))} | {T_max}))

    def job(art):
        try:
            rep = series_dichotomy(params, ledger, n_0=n_0, T_max=T_max, T0=T0,
                                   checkpoints=checkpoints, log_n0=log_n0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        art.csv_text("series.csv", rep.to_csv(header_lines=art.header, stride=stride))
        art.json("summary.json", rep.to_dict())
    return job


_RENEWAL_TASKS = ("log_moment", "discretization", "overshoot", "identity", "fixed_shape")


def _plan_renewal(cfg):
    shape = _shape(cfg)
    tasks = cfg.get("tasks", list(_RENEWAL_TASKS))
    bad = [t for t in tasks if t not in _RENEWAL_TASKS]
    if bad:
        raise ConfigError(f"unknown renewal tasks {bad}")
    seed = _int(cfg, "seed", 0)
    n_max = _cap(cfg.get("n_max"))
    ov = cfg.get("overshoot", {})
    idc = cfg.get("identity", {})
    fx = cfg.get("fixed_shape", {})
    dc = cfg.get("discretization", {})
    probes = []
    if "identity" in tasks:
        for spec in idc.get("G", ["constant", "exponential", "smoothed_step"]):
            spec = {"name": spec} if isinstance(spec, str) else dict(spec)
            try:
                name = spec.pop("name")
                probes.append((name, probe_function(name, **spec)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid probe function {spec!r}: {exc}") from None
    if "fixed_shape" in tasks:
        fx_init = _init({"init": fx.get("init", [0.0, 1.0])})
        fx_N = _int(fx, "N", 10**5, lo=fx_init.size)
    if "overshoot" in tasks:
        s_level = float(ov.get("s", 30.0))
        if not s_level > 0:
            raise ConfigError("overshoot level must be positive")

    def job(art):
        out = {"shape": shape.to_dict(), "seed": seed}
        if "log_moment" in tasks:
            rep = log_moment_report(shape)
            out["log_moment"] = {"mu": rep.mu, "near_divergent": rep.near_divergent,
                                 "finite": rep.finite, "tail_exponent": rep.tail_exponent}
        if "discretization" in tasks:
            fit = strong_discretization_check(shape, dc.get("xs"))
            out["discretization"] = fit.to_dict()
            n = int(dc.get("n", 10))
            out["discretization"]["masses"] = discretize(shape, n).masses.tolist()
        if "overshoot" in tasks:
            law = overshoot_law(shape)
            r_int, t_int = law.normalization()
            smp = simulate_overshoot(shape, s_level, int(ov.get("samples", 10**5)), seed)
            out["overshoot"] = {"s": s_level, "samples": smp.samples, "ks": smp.ks(law),
                                "ks_tilted": smp.ks_tilted(law),
                                "normalization": [r_int, t_int], "seed": seed}
        if "identity" in tasks:
            reps = {}
            for name, G in probes:
                r = renewal_identity_check(G, shape, idc.get("s_grid", [1, 5, 10]),
                                           int(idc.get("samples", 10**5)), seed)
                reps[name] = r.to_dict()
            out["identity"] = reps
        if "fixed_shape" in tasks:
            res = run_fixed_shape(shape, fx_init, fx_N, n_max=n_max)
            out["fixed_shape"] = res.to_dict()
            try:
                out["limit_formula"] = verify_limit_formula(res).to_dict()
            except ValueError as exc:
                out["limit_formula"] = {"error": str(exc)}
            if fx.get("write_trace", False):
                art.csv_text("fixed_shape_trace.csv", res.trace.to_csv(header_lines=art.header))
        art.json("renewal.json", out)
    return job


# ---------------------------------------------------------------------------
# sweep

_SWEEP_TASKS = ("series", "diverge", "certify")
SUMMARY_COLUMNS = ("cell", "A", "alpha", "B", "beta", "exponent", "threshold_side",
                   "status", "classification", "fitted_exponent", "empirical_constant",
                   "partial_sum", "detail")


def _sweep_cells(cfg):
    grid = cfg.get("grid")
    if not isinstance(grid, dict):
        raise ConfigError("sweep needs a 'grid' object over A, alpha, B, beta")
    axes = []
    for key in ("A", "alpha", "B", "beta"):
        vals = grid.get(key)
        if vals is None:
            raise ConfigError(f"grid is missing {key!r}")
        axes.append([float(v) for v in (vals if isinstance(vals, list) else [vals])])
    return [dict(zip(("A", "alpha", "B", "beta"), combo)) for combo in itertools.product(*axes)]


def _cell_summary(task, s):
    """``(classification, fitted exponent, empirical constant, partial sum)``."""
    if task == "series":
        psum = s["checkpoints"].get(str(s["T_max"]))
        return s["regime"], s["fitted_exponent"], None, psum
    if task == "diverge":
        ok = s["invariants_hold"] and s["oscillation_witnessed"]
        c = [v for v in s["C_empirical"] if v is not None]
        return ("oscillating" if ok else "inconclusive", None, max(c) if c else None,
                s["partial_sum"])
    cls = "contracting" if s["nested"] and s["contraction_ok"] else "inconclusive"
    return cls, None, s["c_empirical_max"], s["partial_sum"]


def _sweep_worker(task, cell_cfg, out_dir, conn):
    try:
        art = Artifacts(cell_cfg)
        _PLANNERS[task](cell_cfg)(art)
        art.commit(out_dir)
        summary = json.loads(art.files["summary.json"])
        conn.send(("ok", summary))
    except ConfigError as exc:
        conn.send(("not_applicable", str(exc)))
    except TraceCapacityError as exc:
        conn.send(("cap", str(exc)))
    except InvariantViolation as exc:
        conn.send(("invariant", str(exc)))
    except Exception as exc:  # isolated per cell
        conn.send(("failed", f"{type(exc).__name__}: {exc}"))
    finally:
        conn.close()


def _plan_sweep(cfg, workers):
    task = cfg.get("task", "series")
    if task not in _SWEEP_TASKS:
        raise ConfigError(f"sweep task must be one of {_SWEEP_TASKS}, got {task!r}")
    cells = _sweep_cells(cfg)
    base = {k: v for k, v in cfg.items()
            if k not in ("grid", "task", "budget_s", "cell_budget_s", "workers")}
    budget = float(cfg.get("budget_s", 600.0))
    overrides = {int(k): float(v) for k, v in cfg.get("cell_budget_s", {}).items()}
    cell_cfgs = []
    for i, env in enumerate(cells):
        c = dict(base, envelope=env)
        try:
            _PLANNERS[task](c)
        except ConfigError as exc:
            raise ConfigError(f"cell {i} ({env}): {exc}") from None
        cell_cfgs.append(c)

    def job(art, out_dir):
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        pending = list(range(len(cells)))
        running = {}
        results = {}
        while pending or running:
            while pending and len(running) < max(1, workers):
                i = pending.pop(0)
                parent, child = ctx.Pipe(duplex=False)
                cell_dir = Path(out_dir) / f"cell_{i:03d}"
                p = ctx.Process(target=_sweep_worker,
                                args=(task, cell_cfgs[i], str(cell_dir), child))
                p.start()
                child.close()
                running[i] = (p, parent, time.monotonic(), overrides.get(i, budget))
            time.sleep(0.01)
            for i, (p, conn, t0, lim) in list(running.items()):
                if conn.poll():
                    try:
                        results[i] = conn.recv()
                    except EOFError:
                        results[i] = ("failed", "worker exited without a result")
                    p.join()
                    del running[i]
                elif not p.is_alive():
                    p.join()
                    results[i] = ("failed", f"worker exited with code {p.exitcode}")
                    del running[i]
                elif time.monotonic() - t0 > lim:
                    p.terminate()
                    p.join()
                    cell_dir = Path(out_dir) / f"cell_{i:03d}"
                    if cell_dir.exists():
                        for tmp in cell_dir.glob(".*.tmp"):
                            tmp.unlink()
                    results[i] = ("timeout", f"exceeded {lim:g} s budget")
                    del running[i]
        rows = []
        for i, env in enumerate(cells):
            status, payload = results[i]
            p = env["alpha"] + env["beta"] / 2
            side = "<=1" if p <= 1 else ">1"
            cls = fit = const = psum = None
            detail = ""
            if status == "ok":
                cls, fit, const, psum = _cell_summary(task, payload)
            else:
                detail = payload
            rows.append((i, env["A"], env["alpha"], env["B"], env["beta"], p, side, status,
                         cls, fit, const, psum, detail))
        art.csv_text("summary.csv", _rows_csv(art.header, SUMMARY_COLUMNS, rows))
    return job


_PLANNERS = {
    "simulate": _plan_simulate,
    "diverge": _plan_diverge,
    "certify": _plan_certify,
    "series": _plan_series,
    "renewal": _plan_renewal,
}


# ---------------------------------------------------------------------------
# entry points

def resolve_config(kind, cfg, seed=None, n_max=None):
    """Apply command-line overrides and return the resolved configuration.

    The worker count is an execution setting and stays out of the resolved
    configuration, so artifacts do not depend on it.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    declared = cfg.get("kind", kind)
    if declared != kind:
        raise ConfigError(f"config declares kind {declared!r} but {kind!r} was requested")
    out = dict(cfg)
    out["kind"] = kind
    out.setdefault("schema", SCHEMA_VERSION)
    if seed is not None:
        out["seed"] = int(seed)
    if n_max is not None:
        out["n_max"] = int(n_max)
    if "n_max" in out:
        out["n_max"] = _cap(out["n_max"])
    return out


def _dump_violation(out_dir, resolved, exc):
    state = exc.args[1] if len(exc.args) > 1 else {}
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    _atomic_write(Path(out_dir) / "invariant_violation.json",
                  _dumps({"lookback_version": __version__, "config": resolved,
                          "error": str(exc.args[0]) if exc.args else "", "state": state}))


def run(kind, cfg, out_dir, workers=None):
    """Validate ``cfg``, run the experiment and write artifacts to ``out_dir``.

    Returns the exit status.
    """
    try:
        if kind == "sweep":
            job = _plan_sweep(cfg, int(workers if workers is not None else
                                       cfg.get("workers", 1)))
        else:
            job = _PLANNERS[kind](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    art = Artifacts(cfg)
    try:
        if kind == "sweep":
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            job(art, out_dir)
        else:
            job(art)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceCapacityError as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except InvariantViolation as exc:
        art.commit(out_dir)
        _dump_violation(out_dir, cfg, exc)
        print(f"invariant violation: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_INVARIANT
    art.commit(out_dir)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
    common.add_argument("--out", default="out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the config seed")
    common.add_argument("--n-max", type=int, default=None, metavar="U64",
                        help="override the trace length cap")
    common.add_argument("--workers", type=int, default=None, metavar="N",
                        help="parallel workers (sweep)")
    parser = argparse.ArgumentParser(prog="lookback", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lookback {__version__}")
    sub = parser.add_subparsers(dest="kind", required=True)
    helps = {
        "simulate": "run a process under a weight policy",
        "diverge": "build the back-and-forth divergence construction",
        "certify": "build the nested-interval convergence schedule",
        "series": "iterate a stage map in log-space",
        "renewal": "fixed-shape diagnostics",
        "sweep": "grid over envelope parameters",
    }
    for kind in KINDS:
        sub.add_parser(kind, parents=[common], help=helps[kind])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        resolved = resolve_config(args.kind, cfg, seed=args.seed, n_max=args.n_max)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.kind, resolved, args.out, workers=args.workers)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
