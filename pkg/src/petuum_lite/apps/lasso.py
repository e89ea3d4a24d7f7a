"""Scheduled model-parallel Lasso.

Minimizes ``0.5 * ||y - X beta||^2 + lam * ||beta||_1`` by parallel coordinate
descent. Each clock the scheduler picks a set of coordinates; every worker
computes, on its own block of samples, the partial coordinate-descent
argument for each of them; the aggregator sums the partials, soft-thresholds
and writes the new coefficients back.

``beta`` lives in table ``"beta"`` as ``ceil(d / row_block)`` rows of width
``row_block`` so that it can be spread across server shards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import UsageError
from ..param_server import TableSpec
from ..runtime import AppContract, PullContext, StopRule, WorkerContext
from ..scheduler import CorrelationIndex

BETA = "beta"


def soft_threshold(v: float, lam: float) -> float:
    """``sign(v) * max(|v| - lam, 0)``."""
    if lam < 0:
        raise UsageError("lambda must be non-negative")
    return math.copysign(abs(v) - lam, v) if abs(v) > lam else 0.0


def _threshold(v: float, lam: float, nonneg: bool) -> float:
    return max(v - lam, 0.0) if nonneg else soft_threshold(v, lam)


@dataclass(frozen=True, eq=False)
class LassoProblem:
    """Standardized Lasso instance with unit-norm feature columns.

    With ``duplicated=True`` the design is ``[X, -X]`` and coefficients are
    constrained to be non-negative (``2d`` of them).
    """

    X: np.ndarray
    y: np.ndarray
    lam: float
    duplicated: bool = False
    row_block: int = 64

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise UsageError("X must be a 2-D array")
        if y.shape[0] != X.shape[0]:
            raise UsageError(f"y has {y.shape[0]} entries but X has {X.shape[0]} rows")
        if not self.lam > 0:
            raise UsageError("lambda must be positive")
        if not np.allclose(np.linalg.norm(X, axis=0), 1.0, atol=1e-8):
            raise UsageError("columns of X must have unit 2-norm (use LassoProblem.from_data)")
        if self.row_block < 1:
            raise UsageError("row_block must be positive")
        if self.duplicated:
            X = np.hstack([X, -X])
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_data(cls, X, y, lam: float, **kwargs) -> "LassoProblem":
        """Normalize columns to unit norm and center/scale ``y``."""
        X = np.array(X, dtype=np.float64)
        norms = np.linalg.norm(X, axis=0)
        if np.any(norms == 0):
            raise UsageError("X has an all-zero column")
        y = np.array(y, dtype=np.float64).ravel()
        y = y - y.mean()
        sd = y.std()
        if sd > 0:
            y = y / sd
        return cls(X / norms, y, lam, **kwargs)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_rows(self) -> int:
        return -(-self.d // self.row_block)

    def table(self) -> TableSpec:
        return TableSpec(BETA, self.n_rows, self.row_block)

    def locate(self, j: int) -> Tuple[int, int]:
        return divmod(int(j), self.row_block)

    def beta_from_table(self, table: np.ndarray) -> np.ndarray:
        return np.asarray(table).reshape(-1)[: self.d].copy()

    def shard(self, n_workers: int) -> List["LassoShard"]:
        """Contiguous row blocks of the samples, one per worker."""
        bounds = np.array_split(np.arange(self.n), n_workers)
        return [LassoShard(self.X[idx], self.y[idx]) for idx in bounds]


@dataclass(frozen=True, eq=False)
class LassoShard:
    X: np.ndarray
    y: np.ndarray
    col_sq: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "col_sq", np.einsum("ij,ij->j", self.X, self.X))


def lasso_objective(problem: LassoProblem, beta) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    r = problem.y - problem.X @ beta
    return 0.5 * float(r @ r) + problem.lam * float(np.abs(beta).sum())


def lasso_partial(shard: LassoShard, indices: Sequence[int], beta: np.ndarray) -> Dict[int, float]:
    """Per-shard part of ``x_j.y - sum_{k != j} (x_j.x_k) beta_k`` for each scheduled ``j``."""
    d = shard.X.shape[1]
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise UsageError(f"coefficient index out of range for d={d}")
    active = np.flatnonzero(beta)
    resid = shard.y - shard.X[:, active] @ beta[active] if active.size else shard.y
    z = shard.X[:, idx].T @ resid + shard.col_sq[idx] * beta[idx]
    return {int(j): float(v) for j, v in zip(idx, z)}


def lasso_push(ctx: WorkerContext) -> Dict[int, float]:
    problem: LassoProblem = ctx.state
    beta = problem.beta_from_table(ctx.ps.get_table(BETA))
    return lasso_partial(ctx.data, ctx.decision.indices, beta)


def lasso_pull(ctx: PullContext, decision, partials: Sequence[Mapping[int, float]]):
    """Sum partials per scheduled index, soft-threshold, write with put.

    Returns ``{j: (old, new)}`` for the priority scheduler.
    """
    problem: LassoProblem = ctx.state
    beta = problem.beta_from_table(ctx.ps.get_table(BETA))
    changes = {}
    for j in decision.indices:
        total = 0.0
        for part in partials:
            total += part[j]
        new = _threshold(total, problem.lam, problem.duplicated)
        row, col = problem.locate(j)
        ctx.ps.put(BETA, row, col, new)
        changes[j] = (float(beta[j]), new)
    return changes


def lasso_app(problem: LassoProblem, schedule_kind: str = "priority", max_clocks: int = 1000,
              tol: Optional[float] = None, block_map=None,
              target: Optional[float] = None) -> AppContract:
    corr = None
    if schedule_kind in ("srrp", "priority", "ideal"):
        corr = CorrelationIndex(problem.X)
    return AppContract(
        name="lasso",
        schedule_kind=schedule_kind,
        push_fn=lasso_push,
        pull_fn=lasso_pull,
        tables=[problem.table()],
        objective_fn=lambda tables: lasso_objective(problem, problem.beta_from_table(tables[BETA])),
        n_params=problem.d,
        corr=corr,
        block_map=block_map,
        shard_fn=problem.shard,
        stop=StopRule(max_clocks=max_clocks, tol=tol, target=target),
        state=problem,
    )


def beta_trajectory(problem: LassoProblem, series) -> np.ndarray:
    """Per-clock coefficient vectors of a finished run (needs ``keep_history``)."""
    return np.array([problem.beta_from_table(t[BETA]) for t in series.history])


# ------------------------------------------------------------------- oracle
def cd_update(problem: LassoProblem, beta: np.ndarray, resid: np.ndarray, j: int) -> float:
    """One exact coordinate minimization of ``j`` in place; returns the new value."""
    xj = problem.X[:, j]
    z = float(xj @ resid) + beta[j]
    new = _threshold(z, problem.lam, problem.duplicated)
    if new != beta[j]:
        resid -= (new - beta[j]) * xj
        beta[j] = new
    return new


def sequential_cd(problem: LassoProblem, n_updates: int, beta0=None) -> Tuple[np.ndarray, List[float]]:
    """Cyclic single-coordinate descent; objective after every update."""
    beta = np.zeros(problem.d) if beta0 is None else np.array(beta0, dtype=np.float64)
    resid = problem.y - problem.X @ beta
    objectives = []
    for t in range(n_updates):
        cd_update(problem, beta, resid, t % problem.d)
        objectives.append(lasso_objective(problem, beta))
    return beta, objectives


def solve_lasso(problem: LassoProblem, tol: float = 1e-12, max_sweeps: int = 10_000) -> np.ndarray:
    """Cyclic coordinate descent to convergence (reference optimum)."""
    beta = np.zeros(problem.d)
    resid = problem.y.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(problem.d):
            old = beta[j]
            delta = max(delta, abs(cd_update(problem, beta, resid, j) - old))
        if delta <= tol:
            break
    return beta


def fixed_point_residual(problem: LassoProblem, beta) -> float:
    """max_j |beta_j - S(x_j.y - sum_{k != j} x_j.x_k beta_k, lam)|."""
    beta = np.asarray(beta, dtype=np.float64)
    z = problem.X.T @ (problem.y - problem.X @ beta) + beta
    target = np.array([_threshold(v, problem.lam, problem.duplicated) for v in z])
    return float(np.max(np.abs(beta - target)))
