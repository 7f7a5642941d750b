"""Survival evaluation: C-index, Kaplan-Meier, log-rank, horizon AUROC, bootstrap CIs.

Conventions
-----------
* C-index (Harrell): a pair is comparable when patient ``i`` has an event
  and ``t_j > t_i`` (``j`` censored or not), or when both have events at
  the same time. Comparable pairs with different times score 1 if
  ``risk_i > risk_j``, 0.5 on a risk tie, else 0. Pairs of tied event times
  always score 0.5 since neither ordering is observed.
* Horizon AUROC: positives have an event at ``t <= tau``; negatives are
  followed event-free beyond ``tau``; patients censored at or before
  ``tau`` are left out. Score ties count 0.5.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, UndefinedMetricError


class DegenerateDataError(UndefinedMetricError):
    pass


def _arrays(risks, times, events):
    risks = np.asarray(risks, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if not (risks.shape == times.shape == events.shape) or risks.ndim != 1:
        raise DataError(f"risks {risks.shape}, times {times.shape}, events {events.shape} must be aligned 1D")
    if not np.all(np.isfinite(risks)):
        raise DataError("risks must be finite")
    return risks, times, events


def concordance_counts(risks, times, events) -> tuple[float, int]:
    """``(concordant credit, comparable pairs)``."""
    r, t, e = _arrays(risks, times, events)
    earlier = e[:, None] & (t[:, None] < t[None, :])
    tied = np.triu(e[:, None] & e[None, :] & (t[:, None] == t[None, :]), k=1)
    credit = np.where(r[:, None] > r[None, :], 1.0, np.where(r[:, None] == r[None, :], 0.5, 0.0))
    concordant = float((credit * earlier).sum()) + 0.5 * float(tied.sum())
    return concordant, int(earlier.sum() + tied.sum())


def concordance_index(risks, times, events) -> float:
    concordant, comparable = concordance_counts(risks, times, events)
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the C-index")
    return concordant / comparable


def horizon_labels(times, events, tau: float) -> np.ndarray:
    """1 = event by ``tau``, 0 = event-free beyond ``tau``, -1 = excluded."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    out = np.full(times.shape, -1, dtype=int)
    out[events & (times <= tau)] = 1
    out[times > tau] = 0
    return out


def auroc(scores, labels) -> float:
    """Pairwise AUROC for binary labels (1 positive, 0 negative; others ignored)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(f"AUROC needs positives and negatives (got {pos.size} / {neg.size})")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def auroc_at_horizon(risks, times, events, tau: float) -> float:
    r, t, e = _arrays(risks, times, events)
    return auroc(r, horizon_labels(t, e, tau))


@dataclass
class KmCurve:
    times: np.ndarray  # distinct event times
    survival: np.ndarray  # estimate just after each time
    at_risk: np.ndarray
    events: np.ndarray
    n: int

    def at(self, t) -> np.ndarray:
        """Right-continuous step function value at ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[1.0], self.survival])
        return vals[idx]

    def rows(self, group=None):
        head = [0.0, 1.0, self.n, 0]
        rows = [head] + [[float(a), float(b), int(c), int(d)]
                         for a, b, c, d in zip(self.times, self.survival, self.at_risk, self.events)]
        return [r + [group] for r in rows] if group is not None else rows


def kaplan_meier(times, events) -> KmCurve:
    """Product-limit estimate; censored subjects leave the risk set after their time."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise DataError("Kaplan-Meier needs at least one subject")
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=int)
    d = np.array([(e & (t == u)).sum() for u in uniq], dtype=int)
    surv = np.cumprod(1.0 - d / at_risk) if uniq.size else np.zeros(0)
    return KmCurve(uniq, surv, at_risk, d, int(t.size))


def write_km_csv(path, curves: dict):
    """``curves``: group name -> :class:`KmCurve`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events", "group"])
        for group, curve in curves.items():
            for row in curve.rows(group):
                w.writerow([repr(row[0]), repr(row[1]), row[2], row[3], row[4]])


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed_a: float
    expected_a: float


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = np.asarray(times_a, dtype=float), np.asarray(events_a, dtype=bool)
    tb, eb = np.asarray(times_b, dtype=float), np.asarray(events_b, dtype=bool)
    if ta.size == 0 or tb.size == 0:
        raise DataError("log-rank test needs two non-empty groups")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    uniq = np.unique(t[e])
    if uniq.size == 0:
        raise UndefinedMetricError("log-rank test undefined without events")
    o_minus_e, var, obs, exp = 0.0, 0.0, 0.0, 0.0
    for u in uniq:
        risk = t >= u
        n = risk.sum()
        na = (risk & in_a).sum()
        d = (e & (t == u)).sum()
        da = (e & (t == u) & in_a).sum()
        ea_u = d * na / n
        obs += da
        exp += ea_u
        o_minus_e += da - ea_u
        if n > 1:
            var += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    if var <= 0:
        if o_minus_e == 0:
            return LogRankResult(0.0, 1.0, obs, exp)
        raise UndefinedMetricError("log-rank variance is zero")
    stat = o_minus_e ** 2 / var
    return LogRankResult(float(stat), chi2_sf_1df(stat), float(obs), float(exp))


def median_risk_split(risks, ids=None):
    """``(high, low)`` id lists: risk above the median is high, otherwise low."""
    r = np.asarray(risks, dtype=float)
    if r.size == 0:
        raise DataError("median split needs at least one patient")
    ids = list(range(r.size)) if ids is None else list(ids)
    med = np.median(r)
    high = [i for i, v in zip(ids, r) if v > med]
    low = [i for i, v in zip(ids, r) if v <= med]
    return high, low


@dataclass
class BootstrapCi:
    estimate: float
    lower: float
    upper: float
    resamples: int
    level: float = 0.95

    def to_dict(self):
        return {"estimate": self.estimate, "lower": self.lower, "upper": self.upper,
                "resamples": self.resamples, "level": self.level}


def bootstrap_ci(metric: Callable[..., float], data: Sequence, resamples: int = 1000, level: float = 0.95,
                 seed: int = 0, max_retries: int = 20) -> BootstrapCi:
    """Percentile CI over patient-level resamples with replacement.

    ``data`` is a sequence of arrays aligned on axis 0; ``metric(*arrays)``
    returns a float. Resample ``i`` draws from the stream seeded by
    ``(seed, i, attempt)``, so results do not depend on evaluation order.
    Draws on which the metric is undefined are redrawn.
    """
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0]
    estimate = float(metric(*arrays))
    values = np.empty(resamples)
    draws = undefined = 0
    for i in range(resamples):
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng([seed, i, attempt])
            idx = rng.integers(0, n, size=n)
            draws += 1
            try:
                values[i] = metric(*[a[idx] for a in arrays])
                break
            except UndefinedMetricError:
                undefined += 1
        else:
            raise DegenerateDataError(f"metric undefined on {max_retries + 1} consecutive draws of resample {i}")
        if undefined > 0.5 * resamples:
            raise DegenerateDataError(f"metric undefined on more than half of {resamples} resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return BootstrapCi(estimate, float(lo), float(hi), resamples, level)
