"""Data-parallel distance metric learning.

Learns ``L`` (rank x D) so that ``M = L^T L`` pulls similar pairs together and
pushes dissimilar pairs beyond unit distance, minimizing

    sum_S ||L (x - y)||^2 + lam * sum_D max(0, 1 - ||L (a - b)||^2)

by minibatch SGD. Workers read ``L`` through SSP-gated ``get`` and apply their
steps with additive ``inc``; there is no scheduler and no pull.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..exceptions import UsageError
from ..param_server import TableSpec
from ..runtime import AppContract, StopRule, WorkerContext

L_TABLE = "L"


def _as_pairs(pairs, dim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2, dim or 0))
    if arr.ndim != 3 or arr.shape[1] != 2:
        raise UsageError("pairs must have shape (m, 2, D)")
    if dim is not None and arr.shape[2] != dim:
        raise UsageError(f"pair dimension {arr.shape[2]} does not match D={dim}")
    if not np.all(np.isfinite(arr)):
        raise UsageError("pairs must be finite")
    return arr


def _diffs(pairs: np.ndarray) -> np.ndarray:
    return pairs[:, 0, :] - pairs[:, 1, :]


@dataclass(frozen=True, eq=False)
class DmlProblem:
    similar: np.ndarray
    dissimilar: np.ndarray
    rank: int
    lam: float = 1.0
    eta0: float = 0.1
    C: int = 10

    def __post_init__(self):
        sim = np.asarray(self.similar, dtype=np.float64)
        if sim.ndim != 3 or sim.shape[0] == 0:
            raise UsageError("need at least one similar pair of shape (2, D)")
        dim = sim.shape[2]
        sim = _as_pairs(sim, dim)
        dis = _as_pairs(self.dissimilar, dim)
        if dis.shape[0] == 0:
            raise UsageError("need at least one dissimilar pair")
        if not self.lam > 0:
            raise UsageError("lambda must be positive")
        if not 1 <= self.rank:
            raise UsageError("rank must be >= 1")
        if not self.eta0 > 0 or self.C < 1:
            raise UsageError("eta0 must be positive and C >= 1")
        for a in (sim, dis):
            a.setflags(write=False)
        object.__setattr__(self, "similar", sim)
        object.__setattr__(self, "dissimilar", dis)

    @property
    def dim(self) -> int:
        return self.similar.shape[2]

    def table(self) -> TableSpec:
        return TableSpec(L_TABLE, self.rank, self.dim, init=initial_L(self.rank, self.dim))

    def step(self, clock: int) -> float:
        return self.eta0 / np.sqrt(clock + 1.0)

    def shard(self, n_workers: int) -> List["DmlShard"]:
        sims = np.array_split(self.similar, n_workers)
        diss = np.array_split(self.dissimilar, n_workers)
        shards = [DmlShard(s, d) for s, d in zip(sims, diss)]
        for sh in shards:
            if not len(sh.similar) or not len(sh.dissimilar):
                raise UsageError("a worker was left with an empty shard; use fewer workers")
        return shards


@dataclass(frozen=True, eq=False)
class DmlShard:
    similar: np.ndarray
    dissimilar: np.ndarray


def initial_L(rank: int, dim: int) -> np.ndarray:
    """The identity truncated to its first ``rank`` rows."""
    return np.eye(rank, dim)


def dml_objective(L, problem: DmlProblem) -> float:
    return dml_batch_objective(L, problem.similar, problem.dissimilar, problem.lam)


def dml_batch_objective(L, similar, dissimilar, lam: float) -> float:
    L = np.asarray(L, dtype=np.float64)
    u = _diffs(_as_pairs(similar, L.shape[1])) @ L.T
    v = _diffs(_as_pairs(dissimilar, L.shape[1])) @ L.T
    sim = float(np.sum(u * u))
    hinge = np.maximum(0.0, 1.0 - np.einsum("ij,ij->i", v, v))
    return sim + lam * float(hinge.sum())


def dml_gradient(L, batch_similar, batch_dissimilar, lam: float) -> np.ndarray:
    """Gradient of the batch objective in ``L``.

    ``2 L sum_S u u^T - lam * 2 L sum_{D, ||Lv||^2 < 1} v v^T``; pairs exactly
    on the hinge kink contribute nothing.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2:
        raise UsageError("L must be a matrix")
    sim = _as_pairs(batch_similar, L.shape[1])
    dis = _as_pairs(batch_dissimilar, L.shape[1])
    if not len(sim) and not len(dis):
        raise UsageError("empty batch")
    U = _diffs(sim)
    V = _diffs(dis)
    V = V[np.einsum("ij,ij->i", V @ L.T, V @ L.T) < 1.0]
    return 2.0 * L @ (U.T @ U) - lam * 2.0 * L @ (V.T @ V)


def sample_batch(shard: DmlShard, C: int, rng: np.random.Generator):
    """C similar and C dissimilar pairs drawn uniformly with replacement."""
    if not len(shard.similar) or not len(shard.dissimilar):
        raise UsageError("cannot sample from an empty shard")
    i = rng.integers(0, len(shard.similar), C)
    j = rng.integers(0, len(shard.dissimilar), C)
    return shard.similar[i], shard.dissimilar[j]


def dml_update(L, sim, dis, problem: DmlProblem, clock: int) -> np.ndarray:
    """The additive SGD step ``-step * grad / C`` for one minibatch."""
    return -problem.step(clock) * dml_gradient(L, sim, dis, problem.lam) / problem.C


def dml_push(ctx: WorkerContext) -> None:
    problem: DmlProblem = ctx.state
    L = ctx.ps.get_table(L_TABLE)
    sim, dis = sample_batch(ctx.data, problem.C, ctx.rng)
    delta = dml_update(L, sim, dis, problem, ctx.clock)
    for r in range(problem.rank):
        ctx.ps.inc_row(L_TABLE, r, delta[r])


def dml_app(problem: DmlProblem, max_clocks: int = 200, tol: Optional[float] = None) -> AppContract:
    return AppContract(
        name="dml",
        schedule_kind="empty",
        push_fn=dml_push,
        tables=[problem.table()],
        objective_fn=lambda tables: dml_objective(tables[L_TABLE], problem),
        shard_fn=problem.shard,
        stop=StopRule(max_clocks=max_clocks, tol=tol),
        state=problem,
    )


def sequential_sgd(problem: DmlProblem, n_clocks: int, rng: np.random.Generator,
                   shard: Optional[DmlShard] = None) -> Sequence[float]:
    """Single-worker reference SGD; objective after every step."""
    shard = shard or DmlShard(problem.similar, problem.dissimilar)
    L = initial_L(problem.rank, problem.dim)
    out = []
    for t in range(n_clocks):
        sim, dis = sample_batch(shard, problem.C, rng)
        L = L + dml_update(L, sim, dis, problem, t)
        out.append(dml_objective(L, problem))
    return out
