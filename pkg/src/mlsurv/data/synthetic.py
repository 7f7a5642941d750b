"""Synthetic cohorts with known hazards.

Each patient gets a clinical record drawn from marginals shaped like a
head-and-neck RT cohort, a small CT-like volume with a Gaussian "tumour"
blob and its GTV mask, and four event times. Event times are exponential
with a log-hazard that is linear in a shared latent risk::

    latent   = clinical_weight * z_age + image_weight * z_blob
    hazard_s = base_hazard_s * exp(loading_s * latent)        (recorded)
    T_s      ~ Exp(hazard_s * exp(frailty_sd * eps_s))        (eps_s ~ N(0, 1))

``z_age`` is the standardized age; ``z_blob`` drives both the blob's size
and its brightness. The per-label frailty keeps the labels correlated but
distinct and is not part of the recorded (predictable) hazard.
Censoring times are uniform on ``[0, 2 / censor_rate]`` (none when the
rate is 0), optionally capped by administrative follow-up.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..encoding import LABELS
from ..errors import ConfigurationError
from .clinical import ClinicalRecord
from .volume import VolumeSample

AGE_MEAN, AGE_SD = 61.0, 11.0

_CATEGORIES = {
    "sex": (("male", "female"), (1361, 349)),
    "smoke_status": (("current smoker", "ex-smoker", "non-smoker", "unknown"), (164, 208, 140, 20)),
    "ecog": (("0", "1", "2", ">2"), (1067, 469, 139, 35)),
    "t_stage": (("T0", "T1", "T2", "T3", "T4"), (26, 355, 483, 501, 345)),
    "n_stage": (("N0", "N1", "N2", "N3"), (660, 161, 793, 96)),
    "ajcc_stage": (("I", "II", "III", "IVA", "IVB", "unknown"), (206, 223, 337, 762, 157, 25)),
    "hpv": (("positive", "unknown", "negative"), (722, 988, 257)),
    "chemotherapy": (("yes", "no"), (687, 1023)),
    "treatment_modality": (("RT alone", "ChemoRT", "RT + EGFRI", "Postop RT"), (900, 687, 60, 63)),
}


@dataclass
class SignalSpec:
    raw_extents: tuple = (20, 20, 12)
    crop_extents: tuple = (16, 16, 8)
    blob_offset: tuple = (0, 0, 0)  # blob centre relative to the raw volume centre
    blob_jitter: int = 2  # uniform integer jitter of the centre, voxels per axis
    blob_sigma: float = 1.6  # voxels, at z_blob = 0
    sigma_effect: float = 0.15  # log-sigma change per unit z_blob
    blob_amplitude: float = 300.0  # HU above background, at z_blob = 0
    amplitude_effect: float = 80.0  # HU per unit z_blob
    mask_radius: float = 1.5  # GTV boundary, in blob sigmas
    background_hu: float = -100.0
    noise_hu: float = 40.0
    clinical_weight: float = 1.25
    image_weight: float = 1.25
    loadings: tuple = (1.0, 1.0, 1.0, 1.0)
    frailty_sd: float = 0.3
    base_hazards: tuple = (0.25, 0.2, 0.15, 0.2)  # per year
    censor_rate: float = 0.2
    max_follow_up: Optional[float] = None
    split: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.raw_extents = tuple(int(v) for v in self.raw_extents)
        self.crop_extents = tuple(int(v) for v in self.crop_extents)
        self.blob_offset = tuple(int(v) for v in self.blob_offset)
        self.loadings = tuple(float(v) for v in self.loadings)
        self.base_hazards = tuple(float(v) for v in self.base_hazards)
        self.split = tuple(float(v) for v in self.split)
        if len(self.loadings) != len(self.base_hazards):
            raise ConfigurationError("one loading and one base hazard per label")
        if min(self.base_hazards) <= 0 or self.censor_rate < 0 or self.blob_sigma <= 0:
            raise ConfigurationError("base hazards and blob sigma must be positive, censor rate non-negative")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigurationError("split must be three non-negative fractions summing to 1")


@dataclass
class SyntheticCohort:
    spec: SignalSpec
    seed: int
    records: list
    volumes: list
    times: np.ndarray  # [n, S]
    events: np.ndarray  # [n, S]
    splits: list
    hazards: np.ndarray  # recorded true hazards [n, S]
    latent: np.ndarray
    z_age: np.ndarray
    z_blob: np.ndarray
    blob_centers: np.ndarray  # raw-volume voxel coordinates [n, 3]
    labels: tuple = LABELS
    meta: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [r.patient_id for r in self.records]

    def ground_truth(self) -> dict:
        return {
            "seed": self.seed,
            "labels": list(self.labels),
            "patients": [
                {"id": pid, "latent": float(self.latent[j]), "z_age": float(self.z_age[j]),
                 "z_blob": float(self.z_blob[j]), "blob_center": [int(v) for v in self.blob_centers[j]],
                 "hazards": {lab: float(self.hazards[j, s]) for s, lab in enumerate(self.labels)}}
                for j, pid in enumerate(self.ids)
            ],
        }


def _categorical(rng, name, n):
    values, counts = _CATEGORIES[name]
    p = np.asarray(counts, dtype=float)
    return list(np.asarray(values, dtype=object)[rng.choice(len(values), size=n, p=p / p.sum())])


def draw_clinical(rng, n, prefix="P"):
    z_age = rng.standard_normal(n)
    ages = np.clip(AGE_MEAN + AGE_SD * z_age, 18.0, 99.0)
    smoker = rng.random(n) < 0.65
    cig = np.where(smoker, np.round(rng.lognormal(np.log(25.0), 0.7, n), 1), 0.0)
    cats = {name: _categorical(rng, name, n) for name in _CATEGORIES}
    width = max(3, len(str(n)))
    records = [
        ClinicalRecord(
            patient_id=f"{prefix}{j:0{width}d}", age=float(np.round(ages[j], 2)), cigarettes=float(cig[j]),
            **{name: str(cats[name][j]) for name in _CATEGORIES})
        for j in range(n)
    ]
    z_recorded = (np.array([r.age for r in records]) - AGE_MEAN) / AGE_SD
    return records, z_recorded


def render_blob(rng, spec: SignalSpec, z_blob: float, center):
    """CT (HU) and GTV mask for one patient."""
    grid = np.indices(spec.raw_extents, dtype=float)
    d2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    sigma = spec.blob_sigma * np.exp(spec.sigma_effect * z_blob)
    amp = max(spec.blob_amplitude + spec.amplitude_effect * z_blob, 20.0)
    ct = spec.background_hu + amp * np.exp(-d2 / (2 * sigma ** 2))
    ct = ct + spec.noise_hu * rng.standard_normal(spec.raw_extents)
    mask = (d2 <= (spec.mask_radius * sigma) ** 2).astype(np.uint8)
    mask[tuple(int(c) for c in center)] = 1
    return ct.astype(np.float32), mask


def generate_synthetic_cohort(n: int, spec: Optional[SignalSpec] = None, seed: int = 0) -> SyntheticCohort:
    if n < 10:
        raise ConfigurationError(f"synthetic cohorts need at least 10 patients, got {n}")
    spec = spec or SignalSpec()
    rng = np.random.default_rng(seed)
    records, z_age = draw_clinical(rng, n)
    z_blob = rng.standard_normal(n)
    base_center = np.array([(e - 1) // 2 for e in spec.raw_extents]) + np.array(spec.blob_offset)
    jitter = rng.integers(-spec.blob_jitter, spec.blob_jitter + 1, size=(n, 3))
    centers = np.clip(base_center + jitter, 0, np.array(spec.raw_extents) - 1)
    volumes = []
    for j in range(n):
        ct, mask = render_blob(rng, spec, z_blob[j], centers[j])
        volumes.append(VolumeSample(ct, mask, (1.0, 1.0, 1.0), records[j].patient_id))

    latent = spec.clinical_weight * z_age + spec.image_weight * z_blob
    base = np.asarray(spec.base_hazards)
    loads = np.asarray(spec.loadings)
    S = base.size
    hazards = base[None, :] * np.exp(loads[None, :] * latent[:, None])
    frailty = np.exp(spec.frailty_sd * rng.standard_normal((n, S)))
    t_event = rng.exponential(1.0 / (hazards * frailty))
    if spec.censor_rate > 0:
        t_cens = rng.uniform(0.0, 2.0 / spec.censor_rate, size=(n, S))
    else:
        t_cens = np.full((n, S), np.inf)
    if spec.max_follow_up is not None:
        t_cens = np.minimum(t_cens, spec.max_follow_up)
    events = t_event <= t_cens
    times = np.maximum(np.where(events, t_event, t_cens), 1e-4)

    order = rng.permutation(n)
    n_train = int(round(spec.split[0] * n))
    n_val = int(round(spec.split[1] * n))
    splits = [""] * n
    for rank, j in enumerate(order):
        splits[j] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")
    labels = LABELS if S == len(LABELS) else tuple(f"label{s}" for s in range(S))
    return SyntheticCohort(spec, seed, records, volumes, times, events, splits, hazards, latent,
                           z_age, z_blob, centers, labels)
