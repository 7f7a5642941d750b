"""Volume I/O, preprocessing and augmentation.

On disk a volume is a JSON header plus a raw little-endian float32 file
stored x-fastest (the ``[X, Y, Z]`` array in Fortran order)::

    {"extents": [X, Y, Z], "spacing_mm": [sx, sy, sz],
     "dtype": "float32-le", "order": "x-fastest", "role": "ct", "raw": "p001_ct.raw"}
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import DataError

HU_MIN, HU_MAX = -500.0, 500.0


@dataclass
class VolumeSample:
    ct: np.ndarray  # HU, [X, Y, Z]
    mask: np.ndarray  # {0, 1}, [X, Y, Z]
    spacing: tuple = (1.0, 1.0, 1.0)
    patient_id: str = ""

    def __post_init__(self):
        self.ct = np.asarray(self.ct, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.ct.ndim != 3 or self.ct.shape != self.mask.shape:
            raise DataError(f"patient {self.patient_id}: ct {self.ct.shape} and mask {self.mask.shape} extents differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"patient {self.patient_id}: mask must be binary")
        self.mask = self.mask.astype(np.uint8)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"patient {self.patient_id}: spacing must be three positive values")
        self.spacing = tuple(float(s) for s in self.spacing)


def write_volume(path, array, spacing=(1.0, 1.0, 1.0), role="ct") -> Path:
    """Write ``<path>`` (JSON header) and a sibling ``.raw`` file."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim != 3:
        raise DataError(f"volume must be 3D, got shape {array.shape}")
    raw = path.with_suffix(".raw")
    header = {
        "extents": list(array.shape),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": "float32-le",
        "order": "x-fastest",
        "role": role,
        "raw": raw.name,
    }
    try:
        raw.write_bytes(np.asarray(array, dtype="<f4").tobytes(order="F"))
        path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing volume {path}: {exc}") from exc
    return path


def read_volume(path):
    """Return ``(array[X, Y, Z] float32, header dict)``."""
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
        extents = tuple(int(e) for e in header["extents"])
        data = (path.parent / header["raw"]).read_bytes()
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if header.get("dtype") != "float32-le":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if len(data) != 4 * int(np.prod(extents)):
        raise DataError(f"{path}: raw size {len(data)} bytes does not match extents {extents}")
    arr = np.frombuffer(data, dtype="<f4").reshape(extents, order="F").astype(np.float32)
    return arr, header


def resample_isotropic(sample: VolumeSample, spacing_mm: float = 1.0) -> VolumeSample:
    """Resample to cubic voxels: trilinear for CT, nearest neighbour for the mask."""
    factors = [s / spacing_mm for s in sample.spacing]
    if np.allclose(factors, 1.0):
        return sample
    ct = ndimage.zoom(sample.ct.astype(np.float64), factors, order=1, mode="nearest")
    mask = ndimage.zoom(sample.mask, factors, order=0, mode="nearest")
    return VolumeSample(ct, mask, (spacing_mm,) * 3, sample.patient_id)


def normalize_hu(ct) -> np.ndarray:
    """Clip to [-500, 500] HU and map affinely onto [-1, 1]."""
    ct = np.clip(np.asarray(ct, dtype=np.float64), HU_MIN, HU_MAX)
    return (ct - HU_MIN) / (HU_MAX - HU_MIN) * 2.0 - 1.0


def mask_centroid(mask) -> tuple:
    idx = np.argwhere(np.asarray(mask) > 0)
    if idx.size == 0:
        raise DataError("mask is empty")
    return tuple(int(v) for v in np.floor(idx.mean(axis=0) + 0.5))


def crop_centered(arr, center, extents, fill=0.0) -> np.ndarray:
    """Window of ``extents`` around ``center``, padded with ``fill`` outside the array."""
    out = np.full(extents, fill, dtype=np.float64)
    src, dst = [], []
    for c, e, n in zip(center, extents, arr.shape):
        lo = c - e // 2
        a, b = max(lo, 0), min(lo + e, n)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def preprocess_volume(sample: VolumeSample, crop_extents) -> np.ndarray:
    """``[2, *crop]`` array: normalized CT and GTV mask, centred on the mask centroid.

    Padding outside the scan is 0 in both channels (HU 0 normalizes to 0).
    """
    try:
        center = mask_centroid(sample.mask)
    except DataError:
        raise DataError(f"patient {sample.patient_id}: empty GTV mask") from None
    crop_extents = tuple(int(e) for e in crop_extents)
    ct = crop_centered(normalize_hu(sample.ct), center, crop_extents, 0.0)
    mask = crop_centered(sample.mask.astype(np.float64), center, crop_extents, 0.0)
    return np.stack([ct, mask])


def _rotation(angles_deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rigid_transform(volume, angles_deg=(0.0, 0.0, 0.0), shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotate about the volume centre and translate by ``shift`` voxels.

    CT (channel 0) is resampled trilinearly with fill -1; the mask
    (channel 1) by nearest neighbour with fill 0.
    """
    volume = np.asarray(volume, dtype=np.float64)
    R = _rotation(angles_deg)
    center = (np.array(volume.shape[1:]) - 1) / 2.0
    # output voxel o samples input at R (o - c) + c - shift
    offset = center - R @ center - np.asarray(shift, dtype=float)
    ct = ndimage.affine_transform(volume[0], R, offset=offset, order=1, mode="constant", cval=-1.0)
    mask = ndimage.affine_transform(volume[1], R, offset=offset, order=0, mode="constant", cval=0.0)
    return np.stack([ct, mask])


def augment(volume, rng: np.random.Generator, max_rotation_deg=10.0, max_shift_vox=5.0) -> np.ndarray:
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)
    shift = rng.uniform(-max_shift_vox, max_shift_vox, size=3)
    return rigid_transform(volume, angles, shift)
