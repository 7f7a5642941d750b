"""Multi-task logistic regression (MTLR) heads.

Each label ``s`` has weights ``theta_s`` stored as a ``[d, K-1]`` matrix
(column ``k`` scores time point ``t_k``) and biases ``b_s`` of length
``K-1``. The model assigns to each of the ``K`` legal cumulative sequences
the score ``sum_k (theta_k . x + b_k) y_k``, and the PMF over event
intervals is the softmax of those scores.

The numpy functions here evaluate single patients (or stacked rows); the
tape-based :func:`multi_label_loss` is what the trainer differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp as _lse

from . import autodiff as ad
from .encoding import TargetSequence, TimeGrid
from .errors import DataError, DimensionError, UsageError


@dataclass
class PredictedCurve:
    pmf: np.ndarray  # [K]
    survival: np.ndarray  # S(t_0) .. S(t_{K-1})

    @property
    def K(self):
        return self.pmf.shape[-1]


def _check(theta, bias, x):
    theta = np.asarray(theta, dtype=float)
    bias = np.asarray(bias, dtype=float)
    x = np.asarray(x, dtype=float)
    if theta.ndim != 2 or bias.shape != (theta.shape[1],) or x.shape[-1] != theta.shape[0]:
        raise DimensionError(f"theta {theta.shape}, bias {bias.shape} and features {x.shape} do not conform")
    return theta, bias, x


def time_logits(theta, bias, x) -> np.ndarray:
    """Per-time-point terms ``theta_k . x + b_k``; shape ``[..., K-1]``."""
    theta, bias, x = _check(theta, bias, x)
    return x @ theta + bias


def scores_from_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    rc = np.flip(np.cumsum(np.flip(logits, -1), -1), -1)
    return np.concatenate([rc, np.zeros(logits.shape[:-1] + (1,))], axis=-1)


def sequence_scores(theta, bias, x) -> np.ndarray:
    """Scores of the ``K`` legal sequences; ``score_K = 0``."""
    return scores_from_logits(time_logits(theta, bias, x))


def pmf_from_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def survival_from_pmf(pmf) -> np.ndarray:
    """``S(t_k) = sum_{i>k} pmf_i`` for ``k = 0..K-1``."""
    pmf = np.asarray(pmf, dtype=float)
    tail = np.flip(np.cumsum(np.flip(pmf, -1), -1), -1)
    surv = tail.copy()
    surv[..., 0] = 1.0
    return surv


def curve_from_scores(scores) -> PredictedCurve:
    p = pmf_from_scores(scores)
    return PredictedCurve(p, survival_from_pmf(p))


def pmf(theta, bias, x) -> PredictedCurve:
    return curve_from_scores(sequence_scores(theta, bias, x))


def loglik_uncensored(theta, bias, x, target: TargetSequence) -> float:
    if target.kind != "exact":
        raise UsageError("loglik_uncensored needs an exact-interval target")
    s = sequence_scores(theta, bias, x)
    return float(s[target.interval - 1] - _lse(s))


def loglik_censored(theta, bias, x, censor_interval: int) -> float:
    """Log-probability that the event falls in interval ``censor_interval`` or later."""
    s = sequence_scores(theta, bias, x)
    K = s.shape[-1]
    if not 1 <= censor_interval <= K:
        raise DataError(f"censoring interval {censor_interval} outside 1..{K}")
    if censor_interval == 1:
        return 0.0
    return float(_lse(s[censor_interval - 1:]) - _lse(s))


def loglik(theta, bias, x, target: TargetSequence) -> float:
    if target.kind == "exact":
        return loglik_uncensored(theta, bias, x, target)
    return loglik_censored(theta, bias, x, target.interval)


def risk_score(curve: PredictedCurve, grid: TimeGrid) -> float:
    """Negative restricted mean survival truncated at ``t_{K-1}``."""
    return float(risk_scores(curve.survival, grid))


def risk_scores(survival, grid: TimeGrid) -> np.ndarray:
    survival = np.asarray(survival, dtype=float)
    widths = np.diff(grid.edges())  # t_k - t_{k-1}, k = 1..K-1
    return -(survival[..., 1:] * widths).sum(axis=-1)


def survival_at(survival, grid: TimeGrid, tau: float) -> np.ndarray:
    """Survival at ``tau``, linear between grid points, flat after ``t_{K-1}``."""
    survival = np.asarray(survival, dtype=float)
    edges = grid.edges()
    flat = survival.reshape(-1, survival.shape[-1])
    out = np.array([np.interp(tau, edges, row) for row in flat])
    return out.reshape(survival.shape[:-1])


# --------------------------------------------------------------------------
# differentiable loss


@dataclass
class MtlrHeads:
    """Per-label parameters plus loss weights."""

    thetas: list  # Parameter [d, K-1] per label
    biases: list  # Parameter [K-1] per label
    label_weights: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        self.label_weights = np.asarray(self.label_weights, dtype=float)
        if len(self.thetas) != len(self.biases) or len(self.thetas) != self.label_weights.size:
            raise DimensionError("one theta, bias and weight per label required")
        if np.any(self.label_weights < 0) or self.beta < 0:
            raise ValueError("label weights and beta must be non-negative")

    @property
    def S(self):
        return len(self.thetas)


def head_scores(features, theta, bias) -> ad.Tensor:
    """Tape version of :func:`sequence_scores` for ``[n, d]`` features."""
    return ad.reverse_cumsum_pad(ad.dense(features, theta, bias))


def batch_loglik(scores: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Per-patient log-likelihood ``[n]`` given admissible-interval masks ``[n, K]``."""
    return ad.sub(ad.logsumexp(scores, mask), ad.logsumexp(scores))


def multi_label_loss(features: ad.Tensor, heads: MtlrHeads, masks: Sequence[np.ndarray]) -> ad.Tensor:
    """``-sum_s lambda_s mean_j loglik_s(j) + beta/2 sum_s ||theta_s||^2``.

    ``masks[s]`` is the ``[n, K]`` admissible-interval mask of label ``s``
    (see :func:`encoding.admissible_mask`). Biases are not penalized.
    """
    if len(masks) != heads.S:
        raise DataError(f"expected targets for {heads.S} labels, got {len(masks)}")
    n = features.data.shape[0]
    terms = []
    for s in range(heads.S):
        lam = float(heads.label_weights[s])
        if lam == 0.0:
            continue
        ll = batch_loglik(head_scores(features, heads.thetas[s], heads.biases[s]), masks[s])
        terms.append(ad.scale(ad.total(ll), -lam / n))
    if heads.beta > 0:
        for theta in heads.thetas:
            terms.append(ad.scale(ad.sum_squares(ad._as_node(theta, features.tape)), heads.beta / 2))
    if not terms:
        return ad.scale(ad.total(features), 0.0)
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss


def targets_to_masks(grid: TimeGrid, times, events, patient_ids=None, labels=None) -> list[np.ndarray]:
    """Admissible-interval masks per label from ``[n, S]`` time/event arrays.

    Missing targets (NaN time) raise :class:`DataError` naming patient and label.
    """
    from .encoding import admissible_mask

    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if times.ndim != 2 or times.shape != events.shape:
        raise DimensionError(f"times {times.shape} and events {events.shape} must both be [n, S]")
    bad = np.argwhere(~np.isfinite(times))
    if bad.size:
        j, s = bad[0]
        pid = patient_ids[j] if patient_ids is not None else j
        lab = labels[s] if labels is not None else s
        raise DataError(f"missing target for patient {pid}, label {lab}")
    return [admissible_mask(grid, times[:, s], events[:, s].astype(bool)) for s in range(times.shape[1])]
