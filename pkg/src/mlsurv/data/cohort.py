"""In-memory cohort arrays consumed by training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoding import LABELS, OutcomeRecord
from ..errors import DataError


@dataclass
class Cohort:
    """Preprocessed, model-ready arrays for a set of patients.

    volumes: ``[n, 2, X, Y, Z]`` (normalized CT, GTV mask);
    clinical: ``[n, 11]`` coded features; times/events: ``[n, S]``.
    """

    ids: list
    volumes: np.ndarray
    clinical: np.ndarray
    times: np.ndarray
    events: np.ndarray
    labels: tuple = LABELS
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        self.clinical = np.asarray(self.clinical, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=bool)
        if len(set(self.ids)) != n:
            raise DataError("patient ids must be unique")
        for name in ("volumes", "clinical", "times", "events"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows for {n} patients")
        if self.times.shape != self.events.shape or self.times.shape[1:] != (len(self.labels),):
            raise DataError(f"times/events must be [n, {len(self.labels)}], got {self.times.shape}")

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "Cohort":
        index = np.asarray(index)
        extra = {k: np.asarray(v)[index] for k, v in self.extra.items()}
        return Cohort([self.ids[i] for i in index], self.volumes[index], self.clinical[index],
                      self.times[index], self.events[index], self.labels, extra)

    def outcomes(self, label) -> list[OutcomeRecord]:
        s = self.labels.index(label)
        return [OutcomeRecord(label, float(t), bool(e)) for t, e in zip(self.times[:, s], self.events[:, s])]

    def event_times(self) -> np.ndarray:
        """Observed (uncensored) times pooled over all labels."""
        return self.times[self.events]
