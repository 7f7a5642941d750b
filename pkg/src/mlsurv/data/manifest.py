"""Cohort manifests on disk.

``manifest.json``::

    {"version": 1, "clinical_csv": "clinical.csv",
     "patients": [{"id": "P001", "clinical_row": 0, "split": "train",
                   "ct_path": "volumes/P001_ct.json", "mask_path": "volumes/P001_mask.json",
                   "outcomes": {"os": {"time_years": 2.1, "event": true}, ...}}]}

``clinical_row`` is the 0-based data row of the clinical CSV. Paths are
relative to the manifest's directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..encoding import LABELS
from ..errors import DataError
from .clinical import (NormalizationStats, encode_clinical, fit_normalization,
                       read_clinical_csv, record_from_row, write_clinical_csv)
from .cohort import Cohort
from .synthetic import SyntheticCohort
from .volume import VolumeSample, preprocess_volume, read_volume, write_volume

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass
class LoadedCohort:
    records: list = field(default_factory=list)
    volumes: list = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros((0, len(LABELS))))
    events: np.ndarray = field(default_factory=lambda: np.zeros((0, len(LABELS)), dtype=bool))
    splits: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (patient id, reason)
    labels: tuple = LABELS

    @property
    def ids(self):
        return [r.patient_id for r in self.records]

    def __len__(self):
        return len(self.records)


def write_manifest(cohort: SyntheticCohort, out_dir) -> Path:
    """Write clinical CSV, volumes, ground truth and ``manifest.json``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    write_clinical_csv(cohort.records, out / "clinical.csv")
    patients = []
    for j, (rec, vol) in enumerate(zip(cohort.records, cohort.volumes)):
        pid = rec.patient_id
        ct = write_volume(out / "volumes" / f"{pid}_ct.json", vol.ct, vol.spacing, role="ct")
        mk = write_volume(out / "volumes" / f"{pid}_mask.json", vol.mask, vol.spacing, role="mask")
        patients.append({
            "id": pid,
            "clinical_row": j,
            "split": cohort.splits[j],
            "ct_path": ct.relative_to(out).as_posix(),
            "mask_path": mk.relative_to(out).as_posix(),
            "outcomes": {lab: {"time_years": float(cohort.times[j, s]), "event": bool(cohort.events[j, s])}
                         for s, lab in enumerate(cohort.labels)},
        })
    manifest = {"version": 1, "clinical_csv": "clinical.csv", "labels": list(cohort.labels), "patients": patients}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ground_truth.json").write_text(json.dumps(cohort.ground_truth(), indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return path


def _outcome(entry, lab, pid):
    o = entry.get("outcomes", {}).get(lab)
    if o is None or o.get("time_years") is None or o.get("event") is None:
        return None
    t = float(o["time_years"])
    if not np.isfinite(t) or t <= 0:
        raise DataError(f"patient {pid}: invalid {lab} time {o['time_years']!r}")
    return t, bool(o["event"])


def load_cohort(manifest_path, modality_codes: Optional[dict] = None) -> LoadedCohort:
    """Read and validate a manifest.

    Patients with missing values or unknown category tokens are rejected and
    listed in ``rejected``; missing files, malformed rows and extent
    mismatches raise :class:`DataError` naming the patient.
    """
    from .clinical import code_value

    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    labels = tuple(manifest.get("labels", LABELS))
    entries = manifest.get("patients", [])
    out = LoadedCohort(labels=labels)
    if not entries:
        out.times = np.zeros((0, len(labels)))
        out.events = np.zeros((0, len(labels)), dtype=bool)
        return out
    base = path.parent
    rows = read_clinical_csv(base / manifest["clinical_csv"])
    times, events = [], []
    for entry in entries:
        pid = str(entry["id"])
        row_idx = entry.get("clinical_row")
        if row_idx is None or not 0 <= int(row_idx) < len(rows):
            raise DataError(f"patient {pid}: clinical_row {row_idx!r} not in {manifest['clinical_csv']}")
        row = rows[int(row_idx)]
        if row.get("patient_id") not in (None, pid):
            raise DataError(f"patient {pid}: clinical row {row_idx} belongs to {row['patient_id']}")
        missing = [c for c, v in row.items() if v is None]
        if missing:
            out.rejected.append((pid, f"missing clinical values: {', '.join(missing)}"))
            continue
        try:
            rec = record_from_row(row)
        except DataError as exc:
            raise DataError(f"patient {pid}: malformed clinical row: {exc}") from None
        try:
            for name in ("sex", "smoke_status", "ecog", "t_stage", "n_stage", "ajcc_stage", "hpv",
                         "chemotherapy", "treatment_modality"):
                code_value(name, getattr(rec, name), modality_codes)
        except DataError as exc:
            out.rejected.append((pid, str(exc)))
            continue
        outcomes = [_outcome(entry, lab, pid) for lab in labels]
        if any(o is None for o in outcomes):
            out.rejected.append((pid, "missing outcome for " +
                                 ", ".join(lab for lab, o in zip(labels, outcomes) if o is None)))
            continue
        for key in ("ct_path", "mask_path"):
            if not (base / entry[key]).exists():
                raise DataError(f"patient {pid}: missing file {entry[key]}")
        ct, ct_h = read_volume(base / entry["ct_path"])
        mask, _ = read_volume(base / entry["mask_path"])
        if ct.shape != mask.shape:
            raise DataError(f"patient {pid}: ct extents {ct.shape} differ from mask extents {mask.shape}")
        vol = VolumeSample(ct, np.rint(mask).astype(np.uint8), tuple(ct_h.get("spacing_mm", (1, 1, 1))), pid)
        out.records.append(rec)
        out.volumes.append(vol)
        out.splits.append(entry.get("split", "train"))
        times.append([o[0] for o in outcomes])
        events.append([o[1] for o in outcomes])
    out.times = np.asarray(times, dtype=float).reshape(-1, len(labels))
    out.events = np.asarray(events, dtype=bool).reshape(-1, len(labels))
    for pid, reason in out.rejected:
        log.warning("rejected patient %s: %s", pid, reason)
    return out


def build_cohorts(source, crop_extents, stats: Optional[NormalizationStats] = None,
                  modality_codes: Optional[dict] = None) -> tuple[dict, NormalizationStats]:
    """Model-ready :class:`Cohort` per split plus the training normalization stats.

    ``source`` is a :class:`LoadedCohort` or :class:`SyntheticCohort`.
    """
    splits = list(source.splits)
    if stats is None:
        train_recs = [r for r, s in zip(source.records, splits) if s == "train"]
        stats = fit_normalization(train_recs)
    vols = [preprocess_volume(v, crop_extents) for v in source.volumes]
    out = {}
    for name in SPLITS:
        idx = [j for j, s in enumerate(splits) if s == name]
        out[name] = Cohort(
            [source.records[j].patient_id for j in idx],
            np.stack([vols[j] for j in idx]) if idx else np.zeros((0, 2) + tuple(crop_extents)),
            np.stack([encode_clinical(source.records[j], stats, modality_codes) for j in idx])
            if idx else np.zeros((0, 11)),
            source.times[idx].reshape(-1, len(source.labels)),
            source.events[idx].reshape(-1, len(source.labels)),
            tuple(source.labels),
        )
    return out, stats
