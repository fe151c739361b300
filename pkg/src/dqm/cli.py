"""Command-line entry point: ``dqm {generate,run,sweep,audit,compare}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .analysis import CertificateError
from .data import FormatError, dump_json, save_dataset, save_network, save_problem
from .graph import DisconnectedGraphError
from .solvers import SolverError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_AUDIT = 4
EXIT_INPUT = 5


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="experiment JSON file")
    src.add_argument("--preset", choices=sorted(ex.PRESETS), help="built-in configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
    common.add_argument("--seed", type=int, help="graph seed; data uses seed + 1")
    common.add_argument("--methods", help="comma-separated subset of DQM,DLM,DADMM")
    common.add_argument("--max-iter", type=int, dest="max_iter")
    common.add_argument("--full-state", action="store_true",
                        help="save per-iteration (x, phi) for auditing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dqm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common],
                   help="write config, network, dataset and problem files")
    sub.add_parser("run", parents=[common], help="run the configured methods")
    sw = sub.add_parser("sweep", parents=[common], help="sweep c or r_c")
    sw.add_argument("--axis", choices=("c", "r_c"))
    sw.add_argument("--values", help="comma-separated values")
    sw.add_argument("--seeds", help="comma-separated seeds")
    sub.add_parser("compare", parents=[common], help="run methods and tabulate ratios to DQM")
    au = sub.add_parser("audit", help="audit a run directory saved with --full-state")
    au.add_argument("run_dir", type=Path)
    au.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    if args.config is not None:
        cfg = ex.load_config(args.config)
    else:
        cfg = ex.preset(args.preset or "fig2")
    return ex.apply_overrides(cfg, args.seed, args.methods, args.out, args.full_state,
                              args.max_iter)


def _csv_floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _print(doc):
    print(json.dumps(doc, indent=1, sort_keys=True))


def _audit(args):
    reports = ex.audit_directory(args.run_dir)
    ok = True
    for method, rep in reports.items():
        for name, chk in rep.checks.items():
            extra = f" ({chk.reason})" if chk.reason else ""
            print(f"{method:6s} {name:22s} {chk.status}{extra}")
        ok &= rep.ok
    return EXIT_OK if ok else EXIT_AUDIT


def _dispatch(args):
    if args.command == "audit":
        return _audit(args)
    cfg = _config(args)
    out = Path(cfg["output"]["directory"])
    if args.command == "generate":
        out.mkdir(parents=True, exist_ok=True)
        problem, ds = ex.build_problem(cfg)
        dump_json(cfg, out / "config.json")
        save_network(problem.network, out / "network.json")
        save_problem(problem, out / "problem.json")
        if ds is not None:
            save_dataset(ds, out / "dataset.json")
        print(f"wrote {out}")
        return EXIT_OK
    if args.command == "run":
        summary = ex.run_experiment(cfg, out)
        _print(summary)
        return EXIT_OK if summary.get("audit_ok", True) else EXIT_AUDIT
    if args.command == "compare":
        _print(ex.compare(cfg, out)["ratio_to_DQM"])
        return EXIT_OK
    if args.command == "sweep":
        values = _csv_floats(args.values) if args.values else None
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        doc = ex.run_sweep(cfg, args.axis, values, seeds, out)
        for r in doc["results"]:
            print(f"{doc['axis']}={r['value']:g}  median={r['median']}  per-seed={r['iterations']}")
        print("ranking:", ", ".join(f"{v:g}" for v in doc["ranking"]))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CertificateError, DisconnectedGraphError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ex.MissingStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
