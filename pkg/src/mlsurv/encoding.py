"""Time discretization and binary target sequences for discrete-time survival.

Intervals are right-closed: interval ``k`` (1-based) is ``(t_{k-1}, t_k]``
with ``t_0 = 0`` and ``t_K = inf``. Target sequences use the cumulative
convention: an event in interval ``i`` sets bits ``i..K-1`` to one, an event
in the last (unbounded) interval is the all-zero sequence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError

LABELS = ("os", "lffs", "rffs", "dffs")


@dataclass(frozen=True)
class TimeGrid:
    boundaries: tuple[float, ...]  # t_1 .. t_{K-1}, years

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.size < 1:
            raise ConfigurationError("a time grid needs at least one finite boundary (K >= 2)")
        if not np.all(np.isfinite(b)) or np.any(b <= 0) or np.any(np.diff(b) <= 0):
            raise ConfigurationError(f"boundaries must be positive and strictly increasing: {self.boundaries}")

    @property
    def K(self) -> int:
        return len(self.boundaries) + 1

    def edges(self) -> np.ndarray:
        """``t_0 .. t_{K-1}`` (the finite edges, starting at 0)."""
        return np.concatenate([[0.0], self.boundaries])

    def interval_index(self, time) -> int:
        return interval_index(self, time)


@dataclass(frozen=True)
class OutcomeRecord:
    label: str
    time: float
    event: bool

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise DataError(f"outcome time must be finite and positive, got {self.time} ({self.label})")


@dataclass(frozen=True)
class TargetSequence:
    """Either an exact event interval or a censoring interval.

    ``interval`` is 1-based. For ``kind == "exact"`` the bits are the legal
    cumulative sequence of that interval; for ``"censored"`` the event may
    occur in any interval ``interval..K``.
    """

    kind: str
    interval: int
    K: int

    @property
    def bits(self) -> np.ndarray:
        if self.kind != "exact":
            raise DataError("censored targets have no single sequence")
        return legal_sequence(self.K, self.interval)

    def admissible(self) -> range:
        if self.kind == "exact":
            return range(self.interval, self.interval + 1)
        return range(self.interval, self.K + 1)


def legal_sequence(K: int, interval: int) -> np.ndarray:
    if not 1 <= interval <= K:
        raise DataError(f"interval {interval} outside 1..{K}")
    bits = np.zeros(K - 1)
    bits[interval - 1:] = 1.0
    return bits


def decode_sequence(bits) -> int:
    """Inverse of :func:`legal_sequence`: first set bit, ``K`` if none."""
    bits = np.asarray(bits)
    on = np.flatnonzero(bits > 0.5)
    return int(on[0]) + 1 if on.size else bits.size + 1


def build_time_grid(event_times: Sequence[float], K: int) -> TimeGrid:
    """Boundaries at the ``j/K`` empirical quantiles of observed event times."""
    if K < 2:
        raise ConfigurationError(f"K must be >= 2, got {K}")
    t = np.asarray(event_times, dtype=float)
    t = t[np.isfinite(t)]
    if np.unique(t).size < K:
        raise ConfigurationError(f"need at least K={K} distinct event times, got {np.unique(t).size}")
    q = np.quantile(t, np.arange(1, K) / K)
    for j in range(1, q.size):
        if q[j] <= q[j - 1]:
            q[j] = np.nextafter(q[j - 1], np.inf)
    if q[0] <= 0:
        raise ConfigurationError("event-time quantiles must be positive")
    return TimeGrid(tuple(float(v) for v in q))


def interval_index(grid: TimeGrid, time) -> int:
    """1-based ``k`` with ``t_{k-1} < time <= t_k``; beyond the last boundary -> ``K``."""
    time = float(time)
    if not time > 0:
        raise DataError(f"time must be positive, got {time}")
    return int(np.searchsorted(np.asarray(grid.boundaries), time, side="left")) + 1


def interval_indices(grid: TimeGrid, times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if np.any(~(times > 0)):
        raise DataError("all times must be positive")
    return np.searchsorted(np.asarray(grid.boundaries), times, side="left") + 1


def encode_event(grid: TimeGrid, record: OutcomeRecord) -> TargetSequence:
    k = interval_index(grid, record.time)
    return TargetSequence("exact" if record.event else "censored", k, grid.K)


def admissible_mask(grid: TimeGrid, times, events) -> np.ndarray:
    """Boolean ``[n, K]`` mask of intervals consistent with each outcome.

    Exact events admit one interval; censored records admit ``c..K``.
    """
    k = interval_indices(grid, times)
    events = np.asarray(events, dtype=bool)
    cols = np.arange(1, grid.K + 1)[None, :]
    exact = cols == k[:, None]
    tail = cols >= k[:, None]
    return np.where(events[:, None], exact, tail)
