"""Clinical coding, volume handling, synthetic cohorts and manifests."""
from .clinical import (CODING, FEATURE_NAMES, ClinicalRecord, NormalizationStats, encode_clinical,
                       fit_normalization)
from .cohort import Cohort
from .manifest import LoadedCohort, build_cohorts, load_cohort, write_manifest
from .synthetic import SignalSpec, SyntheticCohort, generate_synthetic_cohort
from .volume import VolumeSample, augment, preprocess_volume, read_volume, rigid_transform, write_volume

__all__ = [
    "CODING", "FEATURE_NAMES", "ClinicalRecord", "NormalizationStats", "encode_clinical", "fit_normalization",
    "Cohort", "LoadedCohort", "build_cohorts", "load_cohort", "write_manifest", "SignalSpec", "SyntheticCohort",
    "generate_synthetic_cohort", "VolumeSample", "augment", "preprocess_volume", "read_volume", "rigid_transform",
    "write_volume",
]
