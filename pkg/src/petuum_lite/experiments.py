"""Experiment harness: configuration, single runs, experiment suites, manifests.

Every experiment writes one metrics CSV per arm plus ``manifest.json`` with
the resolved configuration, seeds and a content hash of the inputs. When an
arm fails its CSV (and the manifest) are left with a ``.partial`` suffix.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .apps.dml import DmlProblem, dml_app
from .apps.lasso import LassoProblem, lasso_app, lasso_objective, solve_lasso
from .conformance import run_conformance
from .data import (
    SyntheticDmlSpec, SyntheticLassoSpec, gen_dml, gen_lasso, ingest_pairs, load_lasso_csv,
)
from .exceptions import PetuumError, RunAborted, UsageError
from .runtime import METRIC_COLUMNS, MetricsSeries, RunConfig, start
from .scheduler import (
    CorrelationIndex, compute_epsilon, count_passing_pairs, masked_spectral_radius,
)

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("lasso-sched-compare", "dml-staleness", "ssp-semantics", "theory-diagnostics")
APPS = ("lasso", "dml")
MANIFEST = "manifest.json"
PARTIAL = ".partial"


class ConfigError(UsageError):
    pass


class ConformanceFailure(PetuumError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


KEYS: Dict[str, Callable[[str], Any]] = {
    "app": str, "schedule": str, "workers": int, "staleness": int, "seed": int,
    "mode": str, "transport": str, "shards": int, "clocks": int, "tol": float,
    "lambda": float, "lam_ratio": float, "theta": float, "q": int, "eta": float,
    "priority_form": str, "step": float, "batch": int, "rank": int,
    "data": str, "header": _parse_bool, "pairs": str,
    "n": int, "d": int, "sparsity": int, "block_size": int, "block_corr": float,
    "noise_sd": float, "dim": int, "n_pairs": int, "n_classes": int,
    "repeats": int, "delay": float, "designs": int, "out": str,
}

DEFAULTS: Dict[str, Any] = {
    "app": "lasso", "schedule": "priority", "workers": 4, "staleness": 0, "seed": 0,
    "mode": "inproc", "transport": "tcp", "shards": 1, "clocks": 200, "tol": None,
    "lambda": None, "lam_ratio": 0.1, "theta": 0.5, "q": None, "eta": 1e-6,
    "priority_form": "delta", "step": 0.1, "batch": 10, "rank": 16,
    "data": None, "header": False, "pairs": None,
    "n": 1000, "d": 500, "sparsity": 20, "block_size": 10, "block_corr": 0.9,
    "noise_sd": 0.1, "dim": 32, "n_pairs": 5000, "n_classes": 8,
    "repeats": 1, "delay": 0.002, "designs": 20, "out": None,
}

KIND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "lasso-sched-compare": {"app": "lasso", "workers": 8, "q": 16, "clocks": 1500,
                            "sparsity": 10, "lam_ratio": 0.3},
    "dml-staleness": {"app": "dml", "workers": 4, "clocks": 300},
    "ssp-semantics": {},
    "theory-diagnostics": {"d": 50, "n": 200},
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def load_config(path) -> Dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def _convert(key: str, value: Any, where: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    if value is None or not isinstance(value, str):
        return value
    if value.lower() in ("none", ""):
        return None
    try:
        return KEYS[key](value)
    except ValueError:
        raise ConfigError(f"{where}: bad value {value!r} for {key}") from None


def resolve_config(file_values: Optional[Dict[str, Any]] = None,
                   overrides: Optional[Dict[str, Any]] = None,
                   kind: Optional[str] = None) -> Dict[str, Any]:
    """Defaults < per-experiment defaults < config file < command-line flags."""
    cfg = dict(DEFAULTS)
    if kind is not None:
        cfg.update(KIND_DEFAULTS.get(kind, {}))
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is not None:
                cfg[key] = _convert(key, value, "flag")
    if cfg["app"] not in APPS:
        raise ConfigError(f"app must be one of {APPS}")
    if cfg["mode"] not in ("inproc", "dist"):
        raise ConfigError("mode must be inproc or dist")
    return cfg


def run_config(cfg: Dict[str, Any], **over) -> RunConfig:
    values = dict(P=cfg["workers"], s=cfg["staleness"], seed=cfg["seed"], mode=cfg["mode"],
                  shards=cfg["shards"], Q=cfg["q"], theta=cfg["theta"], eta=cfg["eta"],
                  transport=cfg["transport"], priority_form=cfg["priority_form"],
                  max_clocks=cfg["clocks"], keep_history=False)
    values.update(over)
    try:
        return RunConfig(**values)
    except UsageError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------------ inputs
def git_blob_hash(data: bytes) -> str:
    """The hash git would give ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_inputs(parts: Dict[str, Any]) -> str:
    blob = json.dumps(parts, sort_keys=True).encode()
    return git_blob_hash(blob)


def lasso_spec(cfg: Dict[str, Any], seed: Optional[int] = None) -> SyntheticLassoSpec:
    return SyntheticLassoSpec(n=cfg["n"], d=cfg["d"], sparsity=cfg["sparsity"],
                              block_size=cfg["block_size"], block_corr=cfg["block_corr"],
                              noise_sd=cfg["noise_sd"], seed=cfg["seed"] if seed is None else seed,
                              lam=cfg["lambda"], lam_ratio=cfg["lam_ratio"], theta=cfg["theta"])


def dml_spec(cfg: Dict[str, Any]) -> SyntheticDmlSpec:
    return SyntheticDmlSpec(dim=cfg["dim"], rank=cfg["rank"], n_pairs=cfg["n_pairs"],
                            n_classes=cfg["n_classes"], lam=cfg["lambda"] or 1.0, C=cfg["batch"],
                            eta0=cfg["step"], seed=cfg["seed"])


def lasso_input(cfg: Dict[str, Any]) -> Tuple[LassoProblem, str]:
    if cfg["data"]:
        if cfg["lambda"] is None:
            raise ConfigError("a Lasso run on a data file needs lambda")
        raw = _read_bytes(cfg["data"])
        problem, _ = load_lasso_csv(cfg["data"], cfg["lambda"], header=cfg["header"])
        return problem, git_blob_hash(raw)
    spec = lasso_spec(cfg)
    return gen_lasso(spec).problem, _hash_inputs({"generator": "lasso", **asdict(spec)})


def dml_input(cfg: Dict[str, Any]) -> Tuple[DmlProblem, str]:
    if cfg["pairs"]:
        raw = _read_bytes(cfg["pairs"])
        sim, dis = ingest_pairs(cfg["pairs"])
        problem = DmlProblem(sim, dis, cfg["rank"], cfg["lambda"] or 1.0, cfg["step"], cfg["batch"])
        return problem, git_blob_hash(raw)
    spec = dml_spec(cfg)
    return gen_dml(spec), _hash_inputs({"generator": "dml", **asdict(spec)})


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


# ----------------------------------------------------------------- outputs
class _Output:
    """Tracks files of one experiment; failed files keep a ``.partial`` suffix."""

    def __init__(self, out_dir, kind: str, cfg: Dict[str, Any]):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest: Dict[str, Any] = {
            "kind": kind, "config": cfg, "columns": list(METRIC_COLUMNS), "arms": {},
            "inputs_hash": None, "seeds": [], "status": "running",
        }
        self.failed = False

    def write_series(self, arm: str, series: MetricsSeries, ok: bool = True) -> Path:
        path = self.dir / f"{arm}.csv"
        series.to_csv(path)
        if not ok:
            path = path.rename(path.with_name(path.name + PARTIAL))
            self.failed = True
        self.manifest["arms"][arm] = {"file": path.name, "sha256": _sha256(path),
                                      "clocks": len(series), "complete": ok}
        return path

    def write_rows(self, name: str, header: List[str], rows: List[list]) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        self.manifest.setdefault("tables", {})[name] = _sha256(path)
        return path

    def close(self) -> Path:
        self.manifest["status"] = "failed" if self.failed else "complete"
        name = MANIFEST + (PARTIAL if self.failed else "")
        path = self.dir / name
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_arm(out: _Output, arm: str, app, rcfg: RunConfig) -> Optional[MetricsSeries]:
    handle = start(app, rcfg)
    try:
        series = handle.wait()
    except RunAborted as exc:
        log.error("arm %s failed: %s", arm, exc)
        partial = MetricsSeries(records=handle.poll())
        out.write_series(arm, partial, ok=False)
        out.manifest["arms"][arm]["error"] = str(exc)
        return None
    out.write_series(arm, series)
    return series


# ------------------------------------------------------------- single run
def run_single(cfg: Dict[str, Any], out_dir) -> Tuple[Path, bool]:
    """One run of ``cfg['app']``; returns (manifest path, success)."""
    out = _Output(out_dir, "run", cfg)
    if cfg["app"] == "lasso":
        problem, digest = lasso_input(cfg)
        app = lasso_app(problem, cfg["schedule"], max_clocks=cfg["clocks"], tol=cfg["tol"])
    else:
        problem, digest = dml_input(cfg)
        app = dml_app(problem, max_clocks=cfg["clocks"], tol=cfg["tol"])
    out.manifest["inputs_hash"] = digest
    out.manifest["seeds"] = [cfg["seed"]]
    _run_arm(out, cfg["app"], app, run_config(cfg))
    return out.close(), not out.failed


# ------------------------------------------------------------ experiments
def _lasso_sched_compare(cfg, out: _Output) -> None:
    rows = []
    seeds = [cfg["seed"] + k for k in range(cfg["repeats"])]
    out.manifest["seeds"] = seeds
    spec = lasso_spec(cfg)
    if cfg["data"]:
        problem, digest = lasso_input(cfg)
    else:
        problem = gen_lasso(spec).problem
        digest = _hash_inputs({"generator": "lasso", **asdict(spec)})
    out.manifest["inputs_hash"] = digest
    f_star = lasso_objective(problem, solve_lasso(problem))
    target = f_star * 1.01
    for kind in ("random", "srrp", "priority"):
        for seed in seeds:
            arm = f"lasso-{kind}-seed{seed}"
            series = _run_arm(out, arm, lasso_app(problem, kind, max_clocks=cfg["clocks"]),
                              run_config(cfg, seed=seed))
            if series is None:
                rows.append([kind, seed, "", "", f_star])
                continue
            hit = [r.clock + 1 for r in series.records if r.objective <= target]
            rows.append([kind, seed, hit[0] if hit else "", repr(series.final_objective), repr(f_star)])
    out.write_rows("summary.csv", ["arm", "seed", "clocks_to_target", "final_objective", "oracle_objective"], rows)


def _dml_staleness(cfg, out: _Output) -> None:
    problem, digest = dml_input(cfg)
    out.manifest["inputs_hash"] = digest
    out.manifest["seeds"] = [cfg["seed"]]
    rows = []
    base = None
    for s in range(4):
        arm = f"dml-s{s}"
        delays = {0: cfg["delay"]} if cfg["delay"] else {}
        series = _run_arm(out, arm, dml_app(problem, max_clocks=cfg["clocks"]),
                          run_config(cfg, s=s, delays=delays))
        if series is None:
            rows.append([s, "", "", "", ""])
            continue
        final = series.final_objective
        base = final if s == 0 else base
        rel = abs(final - base) / abs(base) if base else float("nan")
        rows.append([s, repr(final), repr(rel), repr(series.staleness[0]), repr(series.staleness[1])])
    out.write_rows("summary.csv", ["staleness", "final_objective", "rel_diff_vs_s0",
                                   "staleness_mean", "staleness_var"], rows)


def _ssp_semantics(cfg, out: _Output) -> None:
    results = run_conformance(seed=cfg["seed"])
    out.manifest["seeds"] = [cfg["seed"]]
    out.manifest["inputs_hash"] = _hash_inputs({"conformance_seed": cfg["seed"]})
    rows = [[r.name, "pass" if r.passed else "FAIL", r.reads, r.blocked, r.detail] for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.detail})" if r.detail else ""))
    out.write_rows("conformance.csv", ["scenario", "result", "reads", "blocked", "detail"], rows)
    if not all(r.passed for r in results):
        out.failed = True
        raise ConformanceFailure(f"{sum(not r.passed for r in results)} conformance scenario(s) failed")


def _theory_diagnostics(cfg, out: _Output) -> None:
    rng = np.random.default_rng(cfg["seed"])
    out.manifest["seeds"] = [cfg["seed"]]
    out.manifest["inputs_hash"] = _hash_inputs({"generator": "gaussian-designs", "seed": cfg["seed"],
                                                "designs": cfg["designs"], "n": cfg["n"], "d": cfg["d"]})
    rows = []
    P = cfg["workers"]
    for k in range(cfg["designs"]):
        d = int(rng.integers(2, cfg["d"] + 1))
        X = rng.standard_normal((max(cfg["n"], 2), d))
        corr = CorrelationIndex(X)
        for theta in (0.1, 0.3, 0.7):
            rho = masked_spectral_radius(corr, theta)
            N = count_passing_pairs(corr, theta)
            eps = compute_epsilon(d, P, P * P, max(rho, 1.0), N) if N >= 1 else float("nan")
            rows.append([k, d, theta, repr(rho), repr((d - 1) * theta),
                         abs(rho - 1) <= (d - 1) * theta, repr(N), repr(eps)])
    out.write_rows("diagnostics.csv", ["design", "d", "theta", "rho", "bound", "bound_holds",
                                       "passing_pairs", "epsilon_fixed_P"], rows)


_KINDS = {
    "lasso-sched-compare": _lasso_sched_compare,
    "dml-staleness": _dml_staleness,
    "ssp-semantics": _ssp_semantics,
    "theory-diagnostics": _theory_diagnostics,
}


def run_experiment(kind: str, cfg: Dict[str, Any], out_dir) -> Tuple[Path, bool]:
    """Run experiment ``kind``; returns (manifest path, success)."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown experiment {kind!r}; choose from {EXPERIMENT_KINDS}")
    out = _Output(out_dir, kind, cfg)
    try:
        _KINDS[kind](cfg, out)
    finally:
        path = out.close()
    return path, not out.failed


# ------------------------------------------------------------ reproduction
def _metric_rows(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare_metrics(a, b, ignore=("wall_ms",)) -> List[str]:
    """Differences between two metrics CSVs, ignoring wall-clock columns."""
    ra, rb = _metric_rows(a), _metric_rows(b)
    diffs = []
    if len(ra) != len(rb):
        diffs.append(f"{Path(a).name}: {len(ra)} rows vs {len(rb)}")
    for i, (x, y) in enumerate(zip(ra, rb)):
        for col in x:
            if col not in ignore and x[col] != y.get(col):
                diffs.append(f"{Path(a).name} row {i} {col}: {x[col]} != {y.get(col)}")
    return diffs


def reproduce(manifest_path, out_dir) -> Tuple[bool, List[str]]:
    """Re-run the experiment recorded in a manifest and compare every arm."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = resolve_config(overrides=manifest["config"])
    if manifest["kind"] == "run":
        new_manifest, ok = run_single(cfg, out_dir)
    else:
        new_manifest, ok = run_experiment(manifest["kind"], cfg, out_dir)
    if not ok:
        return False, ["re-run failed"]
    src_dir = Path(manifest_path).parent
    diffs = []
    for arm, info in manifest["arms"].items():
        diffs += compare_metrics(src_dir / info["file"], Path(out_dir) / f"{arm}.csv")
    return not diffs, diffs


def describe_paths(path: os.PathLike) -> str:
    return str(Path(path).resolve())
