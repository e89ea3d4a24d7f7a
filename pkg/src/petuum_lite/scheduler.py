"""Model-parallel scheduling: which parameter indices each worker updates per clock.

Policies
--------
``fixed``     round-robin over a fixed block partition (``schedule_fix``)
``random``    P uniformly drawn indices, no dependency check (shotgun-style)
``srrp``      draw Q > P candidates uniformly, keep a pairwise weakly-correlated subset
``priority``  like ``srrp`` but candidates are drawn with weight ``delta_beta**2 + eta``
``ideal``     like ``srrp`` but only exactly uncorrelated pairs may share a clock
``empty``     data-parallel: every worker touches every parameter, no pull
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConvergenceError, RunAborted, UsageError

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("fixed", "random", "srrp", "priority", "ideal", "empty")

# |x_i . x_j| at or below this counts as "zero correlation" for the ideal schedule;
# orthonormalised columns carry ~1e-16 round-off.
ZERO_CORRELATION = 1e-12


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *keys]))


SCHEDULER_STREAM = 1 << 20


@dataclass(frozen=True)
class ScheduleDecision:
    clock: int
    assignments: Tuple[Tuple[int, Tuple[int, ...]], ...]
    source_version: int = 0

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(j for _, idx in self.assignments for j in idx)

    @property
    def degree(self) -> int:
        return sum(len(idx) for _, idx in self.assignments)

    def for_worker(self, worker: int) -> Tuple[int, ...]:
        for w, idx in self.assignments:
            if w == worker:
                return idx
        return ()


def _spread(clock: int, retained: Sequence[int], n_workers: int, version: int = 0) -> ScheduleDecision:
    assignments = tuple((p, (int(retained[p]),) if p < len(retained) else ())
                        for p in range(n_workers))
    return ScheduleDecision(clock, assignments, version)


class CorrelationIndex:
    """Unit-norm feature columns with a bounded LRU cache of pairwise dot products."""

    def __init__(self, X, cache_size: int = 10**7, normalize: bool = True):
        X = np.array(X, dtype=np.float64)
        if X.ndim != 2:
            raise UsageError("CorrelationIndex needs a 2-D design matrix")
        norms = np.linalg.norm(X, axis=0)
        if np.any(norms == 0):
            raise UsageError("zero column cannot be normalized")
        if normalize:
            X = X / norms
        elif not np.allclose(norms, 1.0, atol=1e-10):
            raise UsageError("columns must have unit 2-norm")
        self.columns = np.asfortranarray(X)
        self.cache_size = cache_size
        self._cache: "OrderedDict[Tuple[int, int], float]" = OrderedDict()
        self.n_evaluations = 0

    @property
    def d(self) -> int:
        return self.columns.shape[1]

    def corr(self, i: int, j: int) -> float:
        self.n_evaluations += 1
        key = (i, j) if i <= j else (j, i)
        value = self._cache.get(key)
        if value is not None:
            self._cache.move_to_end(key)
            return value
        value = float(self.columns[:, i] @ self.columns[:, j])
        self._cache[key] = value
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return value

    def gram(self) -> np.ndarray:
        return self.columns.T @ self.columns


@dataclass
class PriorityState:
    """Sampling weights ``delta**2 + eta`` per coordinate."""

    weights: np.ndarray
    eta: float

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.eta <= 0:
            raise UsageError("eta must be positive")
        if np.any(self.weights <= 0):
            raise UsageError("priority weights must be strictly positive")

    @classmethod
    def initial(cls, d: int, eta: float) -> "PriorityState":
        # untouched coordinates outrank anything that has already settled
        return cls(np.full(d, 1.0 + eta), eta)

    @classmethod
    def uniform(cls, d: int, eta: float = 1.0) -> "PriorityState":
        return cls(np.full(d, eta), eta)

    def update(self, j: int, change: float) -> None:
        self.weights[j] = change * change + self.eta


def draw_without_replacement(weights, k: int, rng: np.random.Generator) -> List[int]:
    """Successive sampling: each draw picks index i with probability w_i / sum(remaining w).

    Consumes exactly one ``rng.random()`` per draw.
    """
    w = np.array(weights, dtype=np.float64)
    if k > len(w):
        raise UsageError(f"cannot draw {k} distinct indices from {len(w)}")
    if np.any(w < 0) or (k and np.count_nonzero(w) < k):
        raise UsageError("need at least k strictly positive weights")
    out = []
    for _ in range(k):
        c = np.cumsum(w)
        target = rng.random() * c[-1]
        i = int(np.searchsorted(c, target, side="right"))
        if i >= len(w) or w[i] == 0:
            i = int(np.flatnonzero(w)[-1])
        out.append(i)
        w[i] = 0.0
    return out


def schedule_priority_draw(prio: PriorityState, Q: int, seed) -> List[int]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return draw_without_replacement(prio.weights, Q, rng)


def default_block_map(d: int, n_workers: int) -> List[Tuple[int, ...]]:
    return [tuple(int(j) for j in b) for b in np.array_split(np.arange(d), n_workers)]


def schedule_fix(clock: int, n_workers: int, d: int, block_map=None) -> ScheduleDecision:
    """Worker p takes the next element (round-robin) of its fixed block."""
    blocks = default_block_map(d, n_workers) if block_map is None else [tuple(b) for b in block_map]
    if len(blocks) != n_workers:
        raise UsageError("block_map must have one block per worker")
    flat = sorted(j for b in blocks for j in b)
    if flat != list(range(d)):
        raise UsageError("block_map must partition 0..d-1")
    assignments = tuple((p, (blocks[p][clock % len(blocks[p])],) if blocks[p] else ())
                        for p in range(n_workers))
    return ScheduleDecision(clock, assignments)


def greedy_compatible(candidates: Sequence[int], limit: int,
                      compatible: Callable[[int, int], bool]) -> List[int]:
    """Examine candidates in order; keep one iff it is compatible with everything kept so far."""
    kept: List[int] = []
    for c in candidates:
        if len(kept) == limit:
            break
        if all(compatible(k, c) for k in kept):
            kept.append(int(c))
    return kept


def schedule_srrp(clock: int, n_workers: int, Q: int, theta: float, corr: CorrelationIndex,
                  prio: Optional[PriorityState] = None, rng=None,
                  version: int = 0) -> ScheduleDecision:
    """Draw Q candidates, retain at most P whose pairwise |x_i . x_j| <= theta."""
    if not Q > n_workers >= 1:
        raise UsageError(f"need Q > P >= 1, got Q={Q}, P={n_workers}")
    if not 0 < theta <= 1:
        raise UsageError(f"theta must lie in (0, 1], got {theta}")
    if corr.d < Q:
        raise UsageError(f"cannot propose Q={Q} candidates from d={corr.d} features")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    weights = np.ones(corr.d) if prio is None else prio.weights
    candidates = draw_without_replacement(weights, Q, rng)
    kept = greedy_compatible(candidates, n_workers,
                             lambda a, b: abs(corr.corr(a, b)) <= theta)
    return _spread(clock, kept, n_workers, version)


def schedule_ideal(clock: int, n_workers: int, Q: int, corr: CorrelationIndex,
                   rng=None, version: int = 0) -> ScheduleDecision:
    """Reference schedule that only co-schedules exactly uncorrelated features."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    candidates = draw_without_replacement(np.ones(corr.d), Q, rng)
    kept = greedy_compatible(candidates, n_workers,
                             lambda a, b: abs(corr.corr(a, b)) <= ZERO_CORRELATION)
    return _spread(clock, kept, n_workers, version)


def schedule_random(clock: int, n_workers: int, d: int, rng=None, version: int = 0) -> ScheduleDecision:
    """Shotgun: P distinct uniformly random indices, no dependency check."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    picked = draw_without_replacement(np.ones(d), min(n_workers, d), rng)
    return _spread(clock, picked, n_workers, version)


# ---------------------------------------------------------------- diagnostics
def compute_epsilon(d: int, expected_P: float, expected_P2: float, rho: float, N: float) -> float:
    """``d * (E[P^2]/E[P] - 1) * (rho - 1) / N``; descent is guaranteed while this is < 1."""
    if expected_P < 1:
        raise UsageError("expected_P must be >= 1")
    if rho < 1 - 1e-9:
        raise UsageError("rho must be >= 1")
    if N < 1:
        raise UsageError("N must be >= 1")
    return d * (expected_P2 / expected_P - 1.0) * (rho - 1.0) / N


def masked_correlation(corr: CorrelationIndex, theta: float) -> np.ndarray:
    G = corr.gram()
    A = np.where(np.abs(G) <= theta, G, 0.0)
    np.fill_diagonal(A, 1.0)
    return A


def spectral_radius(A: np.ndarray, tol: float = 1e-8, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration on A^2.

    Iterating A^2 sidesteps the sign oscillation when A has eigenvalues of
    equal magnitude and opposite sign.
    """
    A = np.asarray(A, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    estimate = np.inf
    for _ in range(max_iter):
        Av = A @ v
        new = float(np.linalg.norm(Av))
        if new == 0.0:
            return 0.0
        if abs(new - estimate) <= tol * max(1.0, new):
            return new
        estimate = new
        w = A @ Av
        v = w / np.linalg.norm(w)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps", estimate)


def masked_spectral_radius(corr: CorrelationIndex, theta: float, cap: int = 2000,
                           tol: float = 1e-8, max_iter: int = 10000) -> float:
    if corr.d > cap:
        raise UsageError(f"d={corr.d} exceeds the diagnostic cap {cap}")
    return spectral_radius(masked_correlation(corr, theta), tol=tol, max_iter=max_iter)


def count_passing_pairs(corr: CorrelationIndex, theta: float, rng=None,
                        exact_limit: int = 500, n_samples: int = 10_000) -> float:
    """Number of ordered pairs (i != j) with |x_i . x_j| <= theta (sampled when d is large)."""
    d = corr.d
    if d < 2:
        return 0.0
    if d <= exact_limit:
        G = np.abs(corr.gram())
        np.fill_diagonal(G, np.inf)
        return float(np.count_nonzero(G <= theta))
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    i = rng.integers(0, d, n_samples)
    j = (i + rng.integers(1, d, n_samples)) % d
    dots = np.einsum("ij,ij->j", corr.columns[:, i], corr.columns[:, j])
    return float(np.mean(np.abs(dots) <= theta) * d * (d - 1))


# ------------------------------------------------------------ stateful pipeline
@dataclass
class Scheduler:
    """Per-run scheduler state: RNG stream, priorities, bootstrap sweep, degree history."""

    kind: str
    n_workers: int
    n_params: int
    Q: Optional[int] = None
    theta: float = 0.5
    eta: float = 1e-6
    corr: Optional[CorrelationIndex] = None
    seed: int = 0
    block_map: Optional[Sequence[Sequence[int]]] = None
    bootstrap: Optional[bool] = None
    priority_form: str = "delta"
    degrees: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise UsageError(f"unknown schedule kind {self.kind!r}")
        if self.priority_form not in ("delta", "magnitude"):
            raise UsageError("priority_form must be 'delta' or 'magnitude'")
        if self.Q is None:
            self.Q = min(2 * self.n_workers, self.n_params)
        if self.kind in ("srrp", "priority", "ideal"):
            if self.corr is None:
                raise UsageError(f"{self.kind} scheduling needs a CorrelationIndex")
            if not self.Q > self.n_workers:
                raise UsageError(f"need Q > P, got Q={self.Q}, P={self.n_workers}")
            if self.corr.d < self.Q:
                raise UsageError(f"d={self.corr.d} < Q={self.Q}")
        if self.bootstrap is None:
            self.bootstrap = self.kind == "priority"
        self.rng = stream(self.seed, SCHEDULER_STREAM)
        self.priority = PriorityState.initial(self.n_params, self.eta)
        self.version = 0
        self._unswept: List[int] = []
        if self.bootstrap:
            self._unswept = [int(j) for j in self.rng.permutation(self.n_params)]
        self._trivial = tuple((p, tuple(range(self.n_params))) for p in range(self.n_workers))

    @property
    def in_bootstrap(self) -> bool:
        return bool(self._unswept)

    def decision(self, clock: int) -> ScheduleDecision:
        """Decision for ``clock`` from the pull feedback seen so far."""
        P = self.n_workers
        if self.kind == "empty":
            return ScheduleDecision(clock, self._trivial, self.version)
        if self._unswept:
            dec = self._sweep_step(clock)
        elif self.kind == "fixed":
            dec = replace(schedule_fix(clock, P, self.n_params, self.block_map),
                          source_version=self.version)
        elif self.kind == "random":
            dec = schedule_random(clock, P, self.n_params, self.rng, self.version)
        elif self.kind == "ideal":
            dec = schedule_ideal(clock, P, self.Q, self.corr, self.rng, self.version)
        else:
            prio = self.priority if self.kind == "priority" else None
            dec = schedule_srrp(clock, P, self.Q, self.theta, self.corr, prio, self.rng, self.version)
        self.degrees.append(dec.degree)
        return dec

    def _sweep_step(self, clock: int) -> ScheduleDecision:
        window = self._unswept[: self.Q]
        if self.corr is None:
            kept = window[: self.n_workers]
        else:
            kept = greedy_compatible(window, self.n_workers,
                                     lambda a, b: abs(self.corr.corr(a, b)) <= self.theta)
        kept_set = set(kept)
        self._unswept = [j for j in self._unswept if j not in kept_set]
        return _spread(clock, kept, self.n_workers, self.version)

    def record_pull(self, changes: Optional[Mapping[int, Tuple[float, float]]]) -> None:
        """Feed ``{index: (old, new)}`` from a pull back into the priorities."""
        if changes:
            for j, (old, new) in changes.items():
                if self.priority_form == "delta":
                    self.priority.update(j, new - old)
                else:
                    self.priority.update(j, new)
        self.version += 1

    def dispatch_pull(self, decision: ScheduleDecision, partials: Mapping[int, object],
                      pull_fn: Optional[Callable], ctx) -> Optional[Mapping]:
        """Run the aggregator once for ``decision`` with partials ordered by worker id."""
        if pull_fn is None:
            return None
        missing = [p for p in range(self.n_workers) if p not in partials]
        if missing:
            raise RunAborted(f"clock {decision.clock}: no partial result from workers {missing}")
        ordered = [partials[p] for p in range(self.n_workers)]
        changes = pull_fn(ctx, decision, ordered)
        self.record_pull(changes)
        return changes

    def degree_moments(self, upto: Optional[int] = None) -> Tuple[float, float]:
        """(E[P], E[P^2]) over the decisions for clocks ``0..upto`` (all if None)."""
        degrees = self.degrees if upto is None else self.degrees[: upto + 1]
        if not degrees:
            return float(self.n_workers), float(self.n_workers) ** 2
        arr = np.asarray(degrees, dtype=np.float64)
        arr = arr[arr > 0] if np.any(arr > 0) else np.ones(1)
        return float(arr.mean()), float((arr**2).mean())
