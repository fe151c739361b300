"""
Synthetic logistic-regression datasets and on-disk formats.

JSON documents carry a ``schema`` name and integer ``version``. Floats are
written with ``repr`` (shortest round-trippable decimal) so a save/load
cycle reproduces every bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Network
from .objective import ConsensusProblem, LogisticLocal, QuadraticLocal
from .solvers import TRACE_COLUMNS

__all__ = [
    "SCHEMA_VERSION",
    "FormatError",
    "Dataset",
    "generate_dataset",
    "logistic_problem",
    "network_to_dict",
    "network_from_dict",
    "save_network",
    "load_network",
    "save_dataset",
    "load_dataset",
    "problem_to_dict",
    "problem_from_dict",
    "save_problem",
    "load_problem",
    "write_trace_csv",
    "read_trace_csv",
    "save_states",
    "load_states",
    "dump_json",
]

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file; the message names the location."""


@dataclass(frozen=True)
class Dataset:
    """
    Per-node labelled samples.

    ``features`` has shape ``(n, q, p)`` and ``labels`` shape ``(n, q)``
    with entries in ``{-1, +1}``.
    """

    features: np.ndarray
    labels: np.ndarray
    w_true: np.ndarray
    seed: int | None = None
    label_noise: float = 0.0

    def __post_init__(self):
        if self.features.ndim != 3 or self.labels.shape != self.features.shape[:2]:
            raise ValueError("features must be (n, q, p) and labels (n, q)")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def q(self):
        return self.features.shape[1]

    @property
    def p(self):
        return self.features.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.w_true, other.w_true)
            and self.seed == other.seed
            and self.label_noise == other.label_noise
        )

    __hash__ = None


def generate_dataset(n, q, p, seed, label_noise=0.05):
    """
    Draw standard-normal features and a standard-normal classifier
    ``w_true``; labels are ``sign(s^T w_true)`` flipped independently with
    probability ``label_noise``.
    """
    if min(n, q, p) < 1:
        raise ValueError("n, q and p must be positive")
    if not 0 <= label_noise < 0.5:
        raise ValueError("label_noise must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(p)
    features = rng.standard_normal((n, q, p))
    labels = np.where(features @ w_true >= 0, 1.0, -1.0)
    flips = rng.random((n, q)) < label_noise
    labels = np.where(flips, -labels, labels)
    return Dataset(features, labels, w_true, seed, float(label_noise))


def logistic_problem(network, dataset, reg=0.0):
    locals_ = [LogisticLocal(dataset.features[i], dataset.labels[i], reg) for i in range(dataset.n)]
    return ConsensusProblem(network.with_dimension(dataset.p), locals_)


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


def dump_json(obj, path):
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _load_json(path, schema):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    _check_schema(doc, schema, str(path))
    return doc


def _check_schema(doc, schema, where):
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: expected a JSON object")
    if doc.get("schema") != schema:
        raise FormatError(f"{where}: expected schema {schema!r}, found {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise FormatError(
            f"{where}: schema version {doc.get('version')!r} is not supported "
            f"(expected {SCHEMA_VERSION})"
        )


def network_to_dict(net):
    return {
        "schema": "network",
        "version": SCHEMA_VERSION,
        "n": net.n,
        "p": net.p,
        "edges": [list(e) for e in net.edges],
        "seed": net.seed,
        "r_c": net.r_c,
        "accepted_seed": net.accepted_seed,
    }


def network_from_dict(doc, where="network"):
    _check_schema(doc, "network", where)
    try:
        return Network(
            int(doc["n"]),
            tuple((int(i), int(j)) for i, j in doc["edges"]),
            int(doc.get("p", 1)),
            doc.get("seed"),
            doc.get("r_c"),
            doc.get("accepted_seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: invalid network: {exc}") from exc


def save_network(net, path):
    dump_json(network_to_dict(net), path)


def load_network(path):
    return network_from_dict(_load_json(path, "network"), str(path))


def dataset_to_dict(ds):
    return {
        "schema": "dataset",
        "version": SCHEMA_VERSION,
        "seed": ds.seed,
        "label_noise": ds.label_noise,
        "n": ds.n,
        "q": ds.q,
        "p": ds.p,
        "w_true": _floats(ds.w_true),
        "features": _floats(ds.features),
        "labels": _floats(ds.labels),
    }


def dataset_from_dict(doc, where="dataset"):
    _check_schema(doc, "dataset", where)
    try:
        ds = Dataset(
            np.array(doc["features"], dtype=float).reshape(doc["n"], doc["q"], doc["p"]),
            np.array(doc["labels"], dtype=float).reshape(doc["n"], doc["q"]),
            np.array(doc["w_true"], dtype=float),
            doc.get("seed"),
            float(doc.get("label_noise", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: invalid dataset: {exc}") from exc
    return ds


def save_dataset(ds, path):
    dump_json(dataset_to_dict(ds), path)


def load_dataset(path):
    return dataset_from_dict(_load_json(path, "dataset"), str(path))


def problem_to_dict(problem):
    """Serialize a problem built from quadratic or logistic locals."""
    locals_ = []
    for f in problem.locals:
        if isinstance(f, LogisticLocal):
            locals_.append(
                {
                    "kind": "logistic",
                    "samples": _floats(f.samples),
                    "labels": _floats(f.labels),
                    "reg": f.reg,
                }
            )
        elif isinstance(f, QuadraticLocal):
            locals_.append({"kind": "quadratic", "b": _floats(f.b), "Q": _floats(f.Q)})
        else:
            raise TypeError(f"cannot serialize {type(f).__name__}")
    return {
        "schema": "problem",
        "version": SCHEMA_VERSION,
        "network": network_to_dict(problem.network),
        "locals": locals_,
    }


def problem_from_dict(doc, where="problem"):
    _check_schema(doc, "problem", where)
    net = network_from_dict(doc["network"], f"{where}/network")
    locals_ = []
    for idx, entry in enumerate(doc["locals"]):
        kind = entry.get("kind")
        if kind == "logistic":
            locals_.append(LogisticLocal(entry["samples"], entry["labels"], entry["reg"]))
        elif kind == "quadratic":
            locals_.append(QuadraticLocal(entry["b"], entry["Q"]))
        else:
            raise FormatError(f"{where}/locals[{idx}]: unknown kind {kind!r}")
    return ConsensusProblem(net, locals_)


def save_problem(problem, path):
    dump_json(problem_to_dict(problem), path)


def load_problem(path):
    return problem_from_dict(_load_json(path, "problem"), str(path))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_trace_csv(trace, path):
    """One row per iterate, columns in :data:`TRACE_COLUMNS` order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace.rows:
        writer.writerow([_fmt(row.get(c)) for c in TRACE_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_trace_csv(path):
    """Return a list of row dicts; empty cells become ``None``."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise FormatError(f"{path}:1: unexpected header {header!r}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(TRACE_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields")
            row = {}
            try:
                for name, cell in zip(TRACE_COLUMNS, rec):
                    if cell == "":
                        row[name] = None
                    elif name in ("k", "wall_ns"):
                        row[name] = int(cell)
                    else:
                        row[name] = float(cell)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            rows.append(row)
    return rows


def save_states(method, states, c, rho, path):
    """Write reduced iterates ``(x_k, phi_k)`` for later auditing."""
    doc = {
        "schema": "states",
        "version": SCHEMA_VERSION,
        "method": method,
        "c": c,
        "rho": rho,
        "x": [_floats(s.x) for s in states],
        "phi": [_floats(s.phi) for s in states],
    }
    dump_json(doc, path)


def load_states(path):
    from .solvers import ReducedState

    doc = _load_json(path, "states")
    try:
        xs, phis = doc["x"], doc["phi"]
        if len(xs) != len(phis):
            raise ValueError("x and phi lists differ in length")
        states = [
            ReducedState(np.array(x, dtype=float), np.array(ph, dtype=float), k)
            for k, (x, ph) in enumerate(zip(xs, phis))
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid states: {exc}") from exc
    return doc["method"], doc["c"], doc.get("rho"), states

