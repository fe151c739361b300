"""
Experiment configuration and drivers behind the command-line interface.

A configuration is a versioned JSON document. Missing fields fall back to
:data:`DEFAULTS`; command-line flags are applied on top with
:func:`apply_overrides`. All randomness is keyed by ``graph.seed``; the data
stream uses ``data.seed`` which defaults to ``graph.seed + 1``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import analysis
from .data import (
    FormatError,
    dump_json,
    generate_dataset,
    load_problem,
    load_states,
    logistic_problem,
    network_to_dict,
    problem_to_dict,
    save_dataset,
    save_network,
    save_problem,
    save_states,
    write_trace_csv,
)
from .graph import build_random_graph, incidence_operators
from .objective import ConsensusProblem, QuadraticLocal
from .solvers import METHODS, SolverConfig, run

__all__ = [
    "CONFIG_VERSION",
    "DEFAULTS",
    "PRESETS",
    "THRESHOLDS",
    "ConfigError",
    "MissingStateError",
    "load_config",
    "validate_config",
    "apply_overrides",
    "build_problem",
    "run_experiment",
    "run_sweep",
    "compare",
    "audit_directory",
]

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
THRESHOLDS = (1e-3, 1e-6, 1e-9)
SWEEP_THRESHOLD = 1e-6

DEFAULTS = {
    "schema": "experiment",
    "version": CONFIG_VERSION,
    "name": "experiment",
    "problem": "logistic",
    "graph": {"n": 10, "r_c": 0.4, "seed": 0},
    "data": {"q": 5, "p": 3, "seed": None, "label_noise": 0.05, "lambda_reg": 0.0},
    "solver": {
        "methods": ["DQM", "DLM", "DADMM"],
        "c": {"DQM": 0.7, "DLM": 5.5, "DADMM": 0.7},
        "rho": {},
        "max_iter": 300,
        "inner_tol": 1e-12,
        "inner_max": 50,
    },
    "analysis": {"mu": 1.01, "mu_prime": 1.01, "audit": False},
    "output": {"directory": "out", "formats": ["csv"], "full_state": False, "record_time": False},
    "sweep": {"axis": "c", "values": [0.2, 0.4, 0.8, 1.0], "seeds": [0, 1, 2, 3, 4],
              "method": "DQM", "tune_c": None},
}

_FIG_NOISE = 0.25
_TUNE_GRID = [round(0.05 * 1.1**j, 6) for j in range(40)]

PRESETS = {
    "fig2": {
        "name": "fig2",
        "data": {"label_noise": _FIG_NOISE},
    },
    "fig4": {
        "name": "fig4",
        "graph": {"n": 100, "r_c": 0.4, "seed": 0},
        "data": {"q": 20, "p": 10, "label_noise": _FIG_NOISE},
        "solver": {"c": {"DQM": 0.68, "DLM": 12.3, "DADMM": 0.68}, "max_iter": 1000},
    },
    "c_sweep": {
        "name": "c_sweep",
        "data": {"label_noise": _FIG_NOISE},
        "solver": {"methods": ["DQM"], "max_iter": 1000},
        "sweep": {"axis": "c", "values": [0.2, 0.4, 0.8, 1.0]},
    },
    "rc_sweep": {
        "name": "rc_sweep",
        "data": {"label_noise": _FIG_NOISE},
        "solver": {"methods": ["DQM"], "max_iter": 600},
        "sweep": {"axis": "r_c", "values": [0.2, 0.3, 0.4, 0.6], "tune_c": _TUNE_GRID},
    },
    "quadratic_smoke": {
        "name": "quadratic_smoke",
        "problem": "quadratic",
        "graph": {"n": 6, "r_c": 0.8, "seed": 2},
        "data": {"p": 2},
        "solver": {"c": {"DQM": 6.0, "DLM": 6.0, "DADMM": 6.0}, "rho": {"DLM": 1.0},
                   "max_iter": 100},
        "analysis": {"audit": True},
        "output": {"full_state": True},
    },
}


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


class MissingStateError(FileNotFoundError):
    """A run directory lacks the per-iteration state needed for auditing."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("c", "rho"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return validate_config(_merge(DEFAULTS, PRESETS[name]))


def load_config(path):
    """Read, merge with defaults and validate a JSON configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if doc.get("schema", "experiment") != "experiment":
        raise ConfigError(f"{path}: expected schema 'experiment', found {doc.get('schema')!r}")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version {doc.get('version')!r} is not supported")
    base = DEFAULTS
    if "preset" in doc:
        base = _merge(DEFAULTS, PRESETS.get(doc["preset"], {}))
        doc = {k: v for k, v in doc.items() if k != "preset"}
    return validate_config(_merge(base, doc), where=str(path))


def _need(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate_config(cfg, where="config"):
    """Check types and ranges; fill ``data.seed`` from ``graph.seed``."""
    unknown = set(cfg) - set(DEFAULTS)
    _need(not unknown, where, f"unknown top-level fields {sorted(unknown)}")
    _need(cfg["problem"] in ("logistic", "quadratic"), where,
          f"problem must be 'logistic' or 'quadratic', got {cfg['problem']!r}")
    g, d, s, a = cfg["graph"], cfg["data"], cfg["solver"], cfg["analysis"]
    try:
        g["n"], g["seed"] = int(g["n"]), int(g["seed"])
        g["r_c"] = float(g["r_c"])
        d["q"], d["p"] = int(d["q"]), int(d["p"])
        d["seed"] = g["seed"] + 1 if d.get("seed") is None else int(d["seed"])
        d["label_noise"], d["lambda_reg"] = float(d["label_noise"]), float(d["lambda_reg"])
        s["max_iter"], s["inner_max"] = int(s["max_iter"]), int(s["inner_max"])
        s["inner_tol"] = float(s["inner_tol"])
        a["mu"] = float(a["mu"])
        a["mu_prime"] = None if a["mu_prime"] is None else float(a["mu_prime"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    _need(g["n"] >= 2, where, "graph.n must be at least 2")
    _need(0 < g["r_c"] <= 1, where, "graph.r_c must lie in (0, 1]")
    _need(min(d["q"], d["p"]) >= 1, where, "data.q and data.p must be positive")
    _need(0 <= d["label_noise"] < 0.5, where, "data.label_noise must lie in [0, 0.5)")
    _need(d["lambda_reg"] >= 0, where, "data.lambda_reg must be non-negative")
    _need(s["max_iter"] >= 0, where, "solver.max_iter must be non-negative")
    methods = s["methods"]
    if isinstance(methods, str):
        methods = [methods]
    methods = [str(m).upper() for m in methods]
    for m in methods:
        _need(m in METHODS, where, f"unknown method {m!r}; choose from {list(METHODS)}")
    _need(methods, where, "solver.methods is empty")
    s["methods"] = methods
    for m in methods:
        _need(m in s["c"], where, f"solver.c has no entry for {m}")
        _need(float(s["c"][m]) > 0, where, f"solver.c[{m}] must be positive")
    s["c"] = {k.upper(): float(v) for k, v in s["c"].items()}
    s["rho"] = {k.upper(): float(v) for k, v in (s.get("rho") or {}).items()}
    for m, r in s["rho"].items():
        _need(r > 0, where, f"solver.rho[{m}] must be positive")
    sw = cfg["sweep"]
    _need(sw["axis"] in ("c", "r_c"), where, "sweep.axis must be 'c' or 'r_c'")
    _need(len(sw["values"]) > 0, where, "sweep.values is empty")
    sw["method"] = str(sw["method"]).upper()
    _need(sw["method"] in METHODS, where, f"unknown sweep method {sw['method']!r}")
    return cfg


def apply_overrides(cfg, seed=None, methods=None, out=None, full_state=None, max_iter=None):
    """Command-line flags take precedence over file values."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["graph"]["seed"] = int(seed)
        cfg["data"]["seed"] = int(seed) + 1
    if methods is not None:
        cfg["solver"]["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    if out is not None:
        cfg["output"]["directory"] = str(out)
    if full_state:
        cfg["output"]["full_state"] = True
    if max_iter is not None:
        cfg["solver"]["max_iter"] = int(max_iter)
    return validate_config(cfg, where="command line")


def rho_for(cfg, method):
    """DLM proximal weight; defaults to the method's ``c``."""
    if method != "DLM":
        return None
    return cfg["solver"]["rho"].get("DLM", cfg["solver"]["c"]["DLM"])


def _quadratic_problem(net, p, seed):
    rng = np.random.default_rng(seed)
    locals_ = []
    for _ in range(net.n):
        b = rng.standard_normal(p)
        Q = np.diag(rng.uniform(0.5, 2.0, size=p))
        locals_.append(QuadraticLocal(b, Q))
    return ConsensusProblem(net.with_dimension(p), locals_)


def build_problem(cfg, r_c=None):
    """Return ``(problem, dataset or None)`` for a configuration."""
    g, d = cfg["graph"], cfg["data"]
    net = build_random_graph(g["n"], g["r_c"] if r_c is None else r_c, g["seed"])
    if cfg["problem"] == "quadratic":
        return _quadratic_problem(net, d["p"], d["seed"]), None
    ds = generate_dataset(g["n"], d["q"], d["p"], d["seed"], d["label_noise"])
    return logistic_problem(net, ds, d["lambda_reg"]), ds


def _graph_hash(net):
    doc = json.dumps(network_to_dict(net), sort_keys=True).encode()
    return hashlib.sha256(doc).hexdigest()


def _iterations_table(trace):
    return {f"{t:.0e}": trace.iterations_to(t) for t in THRESHOLDS}


class _Context:
    """Problem, operators and optimum shared by every method of one run."""

    def __init__(self, cfg, problem):
        self.cfg = cfg
        self.problem = problem
        self.ops = incidence_operators(problem.network)
        self.cert = analysis.optimal_certificate(problem, self.ops)

    def params(self, c):
        a = self.cfg["analysis"]
        return analysis.RateParameters.for_problem(
            self.problem, self.ops, c, mu=a["mu"], mu_prime=a["mu_prime"]
        )

    def solve(self, method, c, keep_states=False, max_iter=None):
        s = self.cfg["solver"]
        if max_iter is None:
            max_iter = s["max_iter"]
        rho = rho_for(self.cfg, method) if method == "DLM" else None
        if method == "DLM" and rho is None:
            rho = c
        config = SolverConfig(method, c, rho, max_iter, s["inner_tol"], s["inner_max"],
                              self.cfg["output"]["record_time"])
        hook = analysis.trace_hook(self.problem, self.ops, self.cert, method, c, rho,
                                   self.params(c))
        t0 = time.perf_counter()
        trace = run(method, self.problem, config, hooks=[hook], keep_states=keep_states,
                    ops=self.ops)
        return trace, rho, time.perf_counter() - t0


def run_experiment(cfg, out_dir=None):
    """
    Generate the problem, run each configured method and write results.

    Files written to ``out_dir``: ``config.json``, ``network.json``,
    ``problem.json``, ``trace_<METHOD>.csv``, ``summary.json`` and, with
    ``output.full_state``, ``states_<METHOD>.json``. With
    ``analysis.audit`` the run is audited and ``audit.json`` is added.

    Returns
    -------
    dict
        The summary document.
    """
    out = Path(out_dir or cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    problem, ds = build_problem(cfg)
    ctx = _Context(cfg, problem)
    dump_json(cfg, out / "config.json")
    save_network(problem.network, out / "network.json")
    save_problem(problem, out / "problem.json")
    if ds is not None:
        save_dataset(ds, out / "dataset.json")
    full = cfg["output"]["full_state"]
    methods = {}
    for method in cfg["solver"]["methods"]:
        c = cfg["solver"]["c"][method]
        trace, rho, secs = ctx.solve(method, c, keep_states=full)
        write_trace_csv(trace, out / f"trace_{method}.csv")
        if full:
            save_states(method, trace.states, c, rho, out / f"states_{method}.json")
        methods[method] = {
            "c": c,
            "rho": rho,
            "iterations_to": _iterations_table(trace),
            "final_rel_err": trace.rows[-1]["rel_err"],
            "runtime_s": secs,
        }
        log.info("%s: %s", method, methods[method]["iterations_to"])
    summary = {
        "schema": "summary",
        "version": CONFIG_VERSION,
        "name": cfg["name"],
        "graph_hash": _graph_hash(problem.network),
        "accepted_seed": problem.network.accepted_seed,
        "seeds": {"graph": cfg["graph"]["seed"], "data": cfg["data"]["seed"]},
        "x0": "zeros",
        "methods": methods,
    }
    dump_json(summary, out / "summary.json")
    if cfg["analysis"]["audit"] and full:
        reports = audit_directory(out)
        summary["audit_ok"] = all(r.ok for r in reports.values())
        dump_json(summary, out / "summary.json")
    return summary


def _median(values):
    """Median treating ``None`` (threshold never reached) as infinite."""
    arr = [math.inf if v is None else v for v in values]
    med = float(np.median(arr))
    return None if math.isinf(med) else med


def run_sweep(cfg, axis=None, values=None, seeds=None, out_dir=None):
    """
    Sweep ``c`` or ``r_c`` with the remaining parameters fixed.

    Every value is run on the same seeds, so for ``r_c`` the graphs share
    their random draws (a link present at a lower ratio stays present at a
    higher one). With ``sweep.tune_c`` set, each graph gets the ``c`` from
    that grid minimizing iterations to ``1e-6``.

    Returns
    -------
    dict
        Per-value results (per-seed iterations, median) and a ranking by
        median iterations to ``1e-6``.
    """
    sw = cfg["sweep"]
    axis = axis or sw["axis"]
    values = list(values if values is not None else sw["values"])
    seeds = list(seeds if seeds is not None else sw["seeds"])
    method = sw["method"]
    tune = sw.get("tune_c") if axis == "r_c" else None
    out = Path(out_dir or cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg, out / "config.json")
    results = []
    for value in values:
        per_seed, chosen = [], []
        for seed in seeds:
            point = apply_overrides(cfg, seed=seed)
            if axis == "r_c":
                point["graph"]["r_c"] = float(value)
            problem, _ = build_problem(point)
            ctx = _Context(point, problem)
            if axis == "c":
                grid = [float(value)]
            else:
                grid = list(tune) if tune else [point["solver"]["c"][method]]
            best = None
            for c in grid:
                # a candidate only matters if it beats the best count so far
                cap = point["solver"]["max_iter"]
                if best is not None and not math.isinf(best[0]):
                    cap = min(cap, best[0])
                trace, _, _ = ctx.solve(method, c, max_iter=cap)
                its = trace.iterations_to(SWEEP_THRESHOLD)
                key = math.inf if its is None else its
                if best is None or key < best[0]:
                    best = (key, c, trace)
            key, c, trace = best
            write_trace_csv(trace, out / f"trace_{axis}={value:g}_seed={seed}.csv")
            per_seed.append(None if math.isinf(key) else int(key))
            chosen.append(c)
        results.append({
            "value": float(value),
            "iterations": per_seed,
            "c": chosen,
            "median": _median(per_seed),
        })
    order = sorted(results, key=lambda r: math.inf if r["median"] is None else r["median"])
    doc = {
        "schema": "sweep",
        "version": CONFIG_VERSION,
        "axis": axis,
        "method": method,
        "threshold": SWEEP_THRESHOLD,
        "seeds": seeds,
        "results": results,
        "ranking": [r["value"] for r in order],
    }
    dump_json(doc, out / "sweep.json")
    return doc


def compare(cfg, out_dir=None):
    """Run every configured method and tabulate iteration ratios against DQM."""
    summary = run_experiment(cfg, out_dir)
    methods = summary["methods"]
    ref = methods.get("DQM")
    table = {}
    for name, info in methods.items():
        row = {}
        for t, its in info["iterations_to"].items():
            base = ref["iterations_to"][t] if ref else None
            row[t] = None if (its is None or not base) else its / base
        table[name] = row
    summary["ratio_to_DQM"] = table
    dump_json(summary, Path(out_dir or cfg["output"]["directory"]) / "summary.json")
    return summary


def audit_directory(run_dir):
    """
    Audit every ``states_<METHOD>.json`` in a run directory.

    Writes ``audit.json`` holding one report per method.

    Raises
    ------
    MissingStateError
        When the directory has no saved states.
    """
    run_dir = Path(run_dir)
    state_files = sorted(run_dir.glob("states_*.json"))
    if not state_files:
        raise MissingStateError(
            f"{run_dir}: no per-iteration states found; re-run with --full-state"
        )
    cfg_path = run_dir / "config.json"
    cfg = load_config(cfg_path) if cfg_path.exists() else validate_config(copy.deepcopy(DEFAULTS))
    problem = load_problem(run_dir / "problem.json")
    ctx = _Context(cfg, problem)
    reports = {}
    for path in state_files:
        method, c, rho, states = load_states(path)
        for s in states:
            if s.x.shape != (problem.n, problem.p) or s.phi.shape != (problem.n, problem.p):
                raise FormatError(f"{path}: state shape does not match the problem")
        reports[method] = analysis.audit(states, problem, ctx.ops, ctx.cert, ctx.params(c),
                                         method, rho)
    dump_json({m: r.to_dict() for m, r in reports.items()}, run_dir / "audit.json")
    return reports
