"""Command-line entry point: ``petuum-lite run|gen|experiment|conformance``.

Exit codes: 0 success, 2 configuration or usage error, 3 run failure,
4 conformance failure. ``PETUUM_LITE_LOG`` sets the log level.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import experiments as ex
from .conformance import run_conformance
from .data import gen_dml, gen_lasso, write_pairs
from .exceptions import PetuumError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_CONFORMANCE = 0, 2, 3, 4

log = logging.getLogger("petuum_lite")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its values")
    p.add_argument("--workers", type=int, help="number of workers P")
    p.add_argument("--staleness", type=int, help="staleness bound s")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["inproc", "dist"])
    p.add_argument("--out", help="output directory (file for gen)")
    p.add_argument("--lambda", dest="lambda_", type=float, help="regularization strength")
    p.add_argument("--theta", type=float, help="correlation threshold")
    p.add_argument("--q", type=int, help="candidate pool size Q")
    p.add_argument("--eta", type=float, help="priority floor")
    p.add_argument("--step", type=float, help="DML base step size")
    p.add_argument("--app", choices=list(ex.APPS))
    p.add_argument("--clocks", type=int, help="maximum number of clocks")
    p.add_argument("--schedule", choices=["priority", "srrp", "random", "fixed", "ideal"])
    p.add_argument("--data", help="Lasso dense CSV (last column is y)")
    p.add_argument("--pairs", help="DML pairs file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="petuum-lite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one application and write its metrics CSV and manifest")
    _common(p)
    p.add_argument("--from-manifest", help="re-run a manifest and compare its metrics")

    p = sub.add_parser("gen", help="write a synthetic dataset")
    _common(p)

    p = sub.add_parser("experiment", help="run an experiment suite")
    p.add_argument("kind", choices=list(ex.EXPERIMENT_KINDS))
    _common(p)
    p.add_argument("--repeats", type=int, help="number of run seeds per arm")

    p = sub.add_parser("conformance", help="run the SSP conformance scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--random", type=int, default=27, help="number of random interleavings")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    keys = ("workers", "staleness", "seed", "mode", "out", "theta", "q", "eta", "step",
            "app", "clocks", "schedule", "data", "pairs", "repeats")
    out = {k: getattr(args, k, None) for k in keys}
    out["lambda"] = getattr(args, "lambda_", None)
    return out


def _config(args, kind: Optional[str] = None) -> Dict[str, object]:
    file_values = ex.load_config(args.config) if getattr(args, "config", None) else {}
    return ex.resolve_config(file_values, _overrides(args), kind=kind)


def _out_dir(cfg, default: str) -> Path:
    return Path(cfg["out"] or default)


def cmd_run(args) -> int:
    if args.from_manifest:
        cfg = _config(args)
        out = _out_dir(cfg, "reproduce")
        ok, diffs = ex.reproduce(args.from_manifest, out)
        for line in diffs[:20]:
            print(line)
        print("reproduced: identical" if ok else f"reproduced: {len(diffs)} difference(s)")
        return EXIT_OK if ok else EXIT_RUN
    cfg = _config(args)
    manifest, ok = ex.run_single(cfg, _out_dir(cfg, "run-out"))
    print(manifest)
    return EXIT_OK if ok else EXIT_RUN


def cmd_gen(args) -> int:
    cfg = _config(args)
    if cfg["app"] == "lasso":
        inst = gen_lasso(ex.lasso_spec(cfg))
        path = Path(cfg["out"] or "lasso.csv")
        data = np.column_stack([inst.problem.X, inst.problem.y])
        np.savetxt(path, data, delimiter=",", fmt="%.17g")
        print(f"wrote {path}: n={inst.problem.n} d={inst.problem.d} lambda={inst.problem.lam:.6g} "
              f"rho(theta={cfg['theta']})={inst.rho:.4f}")
    else:
        problem = gen_dml(ex.dml_spec(cfg))
        path = Path(cfg["out"] or "pairs.txt")
        write_pairs(path, problem.similar, problem.dissimilar)
        print(f"wrote {path}: {len(problem.similar)} similar, {len(problem.dissimilar)} dissimilar, "
              f"dim={problem.dim}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args, kind=args.kind)
    try:
        manifest, ok = ex.run_experiment(args.kind, cfg, _out_dir(cfg, args.kind))
    except ex.ConformanceFailure as exc:
        print(f"conformance failed: {exc}", file=sys.stderr)
        return EXIT_CONFORMANCE
    print(manifest)
    return EXIT_OK if ok else EXIT_RUN


def cmd_conformance(args) -> int:
    results = run_conformance(n_random=args.random, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.detail})" if r.detail else ""))
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} scenarios passed")
    return EXIT_OK if failed == 0 else EXIT_CONFORMANCE


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "experiment": cmd_experiment, "conformance": cmd_conformance}


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("PETUUM_LITE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PetuumError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
