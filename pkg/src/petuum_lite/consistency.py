"""Vector clocks and the stale-synchronous read gate.

A clock entry is the last iteration a worker has *committed*. Iterations are
numbered from 0, so a worker that has not committed anything yet sits at
``NOT_STARTED`` (-1). A worker executing iteration ``c`` therefore has entry
``c - 1``.

Everything here is a pure function over immutable snapshots; blocking lives in
:mod:`petuum_lite.param_server`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

from .exceptions import UsageError

NOT_STARTED = -1


@dataclass(frozen=True)
class VectorClock:
    """Immutable map ``worker-id -> last committed clock``."""

    entries: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for worker, clock in dict(self.entries).items():
            if int(worker) < 0:
                raise UsageError(f"worker ids must be non-negative, got {worker}")
            if int(clock) < NOT_STARTED:
                raise UsageError(f"clock for worker {worker} below {NOT_STARTED}: {clock}")
            frozen[int(worker)] = int(clock)
        object.__setattr__(self, "entries", MappingProxyType(frozen))

    @classmethod
    def start(cls, workers: Iterable[int]) -> "VectorClock":
        """Fresh clock with every worker at ``NOT_STARTED``."""
        return cls({w: NOT_STARTED for w in workers})

    def __getitem__(self, worker: int) -> int:
        try:
            return self.entries[worker]
        except KeyError:
            raise UsageError(f"unknown worker {worker}") from None

    def __contains__(self, worker) -> bool:
        return worker in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def workers(self) -> tuple:
        return tuple(sorted(self.entries))

    def min(self) -> int:
        return min_clock(self)

    def tick(self, worker: int) -> "VectorClock":
        return tick(self, worker)

    def as_dict(self) -> dict:
        return dict(self.entries)

    def __hash__(self):
        return hash(tuple(sorted(self.entries.items())))

    def __eq__(self, other):
        if not isinstance(other, VectorClock):
            return NotImplemented
        return dict(self.entries) == dict(other.entries)

    def __repr__(self):
        inner = ", ".join(f"w{w}:{c}" for w, c in sorted(self.entries.items()))
        return f"VectorClock({{{inner}}})"


def check_staleness(s: int) -> int:
    """Validate a staleness bound; ``s = 0`` is bulk-synchronous."""
    if isinstance(s, bool) or int(s) != s or s < 0:
        raise UsageError(f"staleness bound must be a non-negative integer, got {s!r}")
    return int(s)


def min_clock(vc: VectorClock) -> int:
    if not len(vc):
        raise UsageError("min_clock of an empty vector clock")
    return min(vc.entries.values())


def ssp_read_permitted(reader_clock: int, s: int, vc: VectorClock) -> bool:
    """True iff every update stamped ``<= reader_clock - s - 1`` has been committed."""
    if reader_clock < 0:
        raise UsageError(f"reader clock must be >= 0, got {reader_clock}")
    return min_clock(vc) >= reader_clock - check_staleness(s) - 1


def tick(vc: VectorClock, worker: int) -> VectorClock:
    if worker not in vc.entries:
        raise UsageError(f"unknown worker {worker}")
    entries = dict(vc.entries)
    entries[worker] += 1
    return VectorClock(entries)
