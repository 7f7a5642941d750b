"""Clinical variable coding.

Eleven features, in this order::

    age, sex, cigarettes, smoke_status, ecog, t_stage, n_stage,
    ajcc_stage, hpv, chemotherapy, treatment_modality

Age and cigarette exposure (cigarettes/day x years smoked) are z-scored
with training-split statistics; the categorical fields use the fixed codes
in :data:`CODING`.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError

FEATURE_NAMES = (
    "age", "sex", "cigarettes", "smoke_status", "ecog", "t_stage", "n_stage",
    "ajcc_stage", "hpv", "chemotherapy", "treatment_modality",
)

CODING = {
    "sex": {"male": 1, "female": -1},
    "smoke_status": {"current smoker": -1, "ex-smoker": 0, "non-smoker": 1, "unknown": 0},
    "ecog": {"0": 0, "1": 1, "2": 2, ">2": 3},
    "t_stage": {"t0": 0, "t1": 1, "t2": 2, "t3": 3, "t4": 4},
    "n_stage": {"n0": 0, "n1": 1, "n2": 2, "n3": 3},
    "ajcc_stage": {"i": 1, "ii": 2, "iii": 3, "iva": 4, "ivb": 5, "unknown": 0},
    "hpv": {"positive": 1, "unknown": 0, "negative": -1},
    "chemotherapy": {"yes": 1, "no": -1},
}

# ordinal over the cohort's modality categories; override with a mapping file
DEFAULT_MODALITY_CODES = {"rt alone": 0, "chemort": 1, "rt + egfri": 2, "postop rt": 3}


def load_modality_mapping(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {str(k).strip().lower(): int(v) for k, v in raw.items()}


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    age: float
    sex: str
    cigarettes: float
    smoke_status: str
    ecog: str
    t_stage: str
    n_stage: str
    ajcc_stage: str
    hpv: str
    chemotherapy: str
    treatment_modality: str


CSV_COLUMNS = tuple(f.name for f in fields(ClinicalRecord))


@dataclass(frozen=True)
class NormalizationStats:
    age_mean: float
    age_sd: float
    cigarettes_mean: float
    cigarettes_sd: float


def _token(value) -> str:
    return str(value).strip().lower()


def code_value(field: str, value, modality_codes: Optional[dict] = None) -> int:
    """Coded number for one categorical field; unknown tokens raise :class:`DataError`."""
    table = (modality_codes or DEFAULT_MODALITY_CODES) if field == "treatment_modality" else CODING[field]
    tok = _token(value)
    if tok not in table:
        raise DataError(f"unknown value {value!r} for field {field}")
    return table[tok]


def fit_normalization(records: Sequence[ClinicalRecord]) -> NormalizationStats:
    """Mean and sample standard deviation of age and cigarette exposure."""
    if len(records) == 0:
        raise DataError("cannot fit normalization on an empty record set")
    if len(records) < 2:
        raise DataError("need at least two records to estimate a standard deviation")
    stats = []
    for name in ("age", "cigarettes"):
        v = np.array([float(getattr(r, name)) for r in records])
        sd = float(v.std(ddof=1))
        if sd == 0.0:
            warnings.warn(f"{name} has zero spread in the training records; using sd = 1", RuntimeWarning)
            sd = 1.0
        stats += [float(v.mean()), sd]
    return NormalizationStats(*stats)


def encode_clinical(record: ClinicalRecord, stats: NormalizationStats,
                    modality_codes: Optional[dict] = None) -> np.ndarray:
    if not float(record.age) > 0:
        raise DataError(f"patient {record.patient_id}: age must be positive")
    out = np.empty(len(FEATURE_NAMES))
    out[0] = (float(record.age) - stats.age_mean) / stats.age_sd
    out[2] = (float(record.cigarettes) - stats.cigarettes_mean) / stats.cigarettes_sd
    for i, name in enumerate(FEATURE_NAMES):
        if name in ("age", "cigarettes"):
            continue
        try:
            out[i] = code_value(name, getattr(record, name), modality_codes)
        except DataError as exc:
            raise DataError(f"patient {record.patient_id}: {exc}") from None
    return out


def encode_many(records, stats, modality_codes=None) -> np.ndarray:
    return np.stack([encode_clinical(r, stats, modality_codes) for r in records]) if records else np.zeros((0, 11))


def write_clinical_csv(records: Sequence[ClinicalRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_clinical_csv(path) -> list[dict]:
    """Rows as dicts of raw strings (empty cell -> ``None``)."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty clinical CSV") from None
        missing = set(CSV_COLUMNS) - set(header)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            rows.append({h: (c if c.strip() != "" else None) for h, c in zip(header, row)})
    return rows


def record_from_row(row: dict) -> ClinicalRecord:
    """Build a record from a CSV row; missing cells raise :class:`DataError`."""
    missing = [c for c in CSV_COLUMNS if row.get(c) is None]
    if missing:
        raise DataError(f"missing values for {', '.join(missing)}")
    try:
        age, cig = float(row["age"]), float(row["cigarettes"])
    except ValueError as exc:
        raise DataError(f"non-numeric age or cigarettes: {exc}") from None
    kwargs = {c: row[c] for c in CSV_COLUMNS}
    kwargs.update(age=age, cigarettes=cig)
    return ClinicalRecord(**kwargs)
