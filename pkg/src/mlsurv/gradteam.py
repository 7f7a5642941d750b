"""Time-event activation maps for a trained survival model.

For a chosen label ``s`` and event interval ``k`` the guidance scalar is
the unnormalized score of the legal sequence for ``k``,
``<y_k, logits_s(x)>``, the survival analogue of a class logit. Its
gradient gives

* a coarse map over the last conv layer: ``relu(sum_c alpha_c A_c)`` with
  ``alpha_c`` the spatial mean of ``d score / d A_c``;
* a guided-backprop map over the input CT channel.

The final map is the coarse map upsampled trilinearly to the input grid,
times ``|guided map|``, min-max scaled to ``[0, 1]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data.volume import read_volume, write_volume
from .encoding import legal_sequence
from .errors import ConfigurationError
from .network import ForwardPass, SurvivalModel, forward


@dataclass(frozen=True)
class GuidanceVector:
    label: str
    interval: int  # 1-based
    bits: tuple


def guidance_vector(model: SurvivalModel, label: str, interval: int) -> GuidanceVector:
    if label not in model.labels:
        raise ConfigurationError(f"unknown label {label!r}; model has {model.labels}")
    K = model.config.K
    if not 1 <= int(interval) <= K:
        raise ConfigurationError(f"interval {interval} outside 1..{K}")
    return GuidanceVector(label, int(interval), tuple(legal_sequence(K, int(interval))))


@dataclass
class ActivationMap:
    values: np.ndarray  # [X, Y, Z], in [0, 1]
    raw: np.ndarray  # un-normalized product
    label: str
    interval: int
    patient_id: str = ""


def guidance_score(model: SurvivalModel, volume, clinical, guidance: GuidanceVector,
                   mode: str = "score") -> tuple[ad.Tensor, ForwardPass]:
    """Scalar to backpropagate, and the forward pass it was computed on.

    ``mode="score"``: ``<bits, logits>``; ``mode="log_pmf"``: log PMF of the interval.
    """
    fp = forward(model, volume, clinical)
    s = model.labels.index(guidance.label)
    if mode == "score":
        out = ad.weighted_sum(fp.logits[s], np.asarray(guidance.bits)[None, :])
    elif mode == "log_pmf":
        mask = np.zeros(fp.scores[s].data.shape, dtype=bool)
        mask[:, guidance.interval - 1] = True
        out = ad.total(ad.sub(ad.logsumexp(fp.scores[s], mask), ad.logsumexp(fp.scores[s])))
    else:
        raise ConfigurationError(f"unknown guidance mode {mode!r}")
    return out, fp


def _coarse_from(fp: ForwardPass, grads) -> np.ndarray:
    A = fp.nodes["last_conv"]
    dA = fp.tape.grad_of(grads, A)[0]  # [C, x, y, z]
    alpha = dA.mean(axis=(1, 2, 3))
    return np.maximum(np.tensordot(alpha, A.data[0], axes=(0, 0)), 0.0)


def grad_weighted_map(model, volume, clinical, guidance, mode="score") -> np.ndarray:
    """Coarse map over the last conv layer's spatial grid."""
    if model.config.modality == "clinical":
        return np.zeros(model.config.coarse_extents())
    score, fp = guidance_score(model, volume, clinical, guidance, mode)
    grads = fp.tape.backward(score, accumulate=False)
    return _coarse_from(fp, grads)


def guided_backprop(model, volume, clinical, guidance, mode="score") -> np.ndarray:
    """Guided gradient of the guidance scalar w.r.t. the CT channel."""
    score, fp = guidance_score(model, volume, clinical, guidance, mode)
    grads = fp.tape.backward(score, guided=True, accumulate=False)
    return fp.tape.grad_of(grads, fp.nodes["volume"])[0, 0]


def upsample_trilinear(coarse, extents) -> np.ndarray:
    """Separable linear interpolation on voxel centres, clamped at the borders."""
    out = np.asarray(coarse, dtype=np.float64)
    for axis, n_out in enumerate(extents):
        n_in = out.shape[axis]
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        w = pos - lo
        shape = [1] * out.ndim
        shape[axis] = n_out
        w = w.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1 - w) + np.take(out, hi, axis=axis) * w
    return out


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    hi, lo = v.max(), v.min()
    if hi <= 0:
        return np.zeros_like(v)
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def fuse_and_upsample(coarse, guided, extents, label="", interval=0, patient_id="") -> ActivationMap:
    raw = upsample_trilinear(coarse, extents) * np.abs(guided)
    return ActivationMap(minmax(raw), raw, label, interval, patient_id)


def activation_map(model: SurvivalModel, volume, clinical, label: str, interval: int,
                   patient_id: str = "", mode: str = "score") -> ActivationMap:
    """Full time-event activation map for one patient."""
    g = guidance_vector(model, label, interval)
    extents = model.config.volume_extents
    if model.config.modality == "clinical":
        z = np.zeros(extents)
        return ActivationMap(z, z.copy(), label, g.interval, patient_id)
    score, fp = guidance_score(model, volume, clinical, g, mode)
    coarse = _coarse_from(fp, fp.tape.backward(score, accumulate=False))
    guided = fp.tape.grad_of(fp.tape.backward(score, guided=True, accumulate=False), fp.nodes["volume"])[0, 0]
    return fuse_and_upsample(coarse, guided, extents, label, g.interval, patient_id)


def write_pgm(path, image2d):
    """Binary greyscale PGM (P5, maxval 255) from values in [0, 1]; rows = y, columns = x."""
    img = np.clip(np.asarray(image2d, dtype=np.float64), 0.0, 1.0)
    pix = np.floor(img.T * 255.0 + 0.5).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_map(amap: ActivationMap, path, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Write the map volume (header + raw) and its mid-axial slice as PGM."""
    path = Path(path)
    try:
        header = write_volume(path.with_suffix(".json"), amap.values, spacing, role="activation")
        meta = json.loads(header.read_text(encoding="utf-8"))
        meta.update({"label": amap.label, "interval": amap.interval, "patient_id": amap.patient_id})
        header.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        pgm = path.with_suffix(".pgm")
        write_pgm(pgm, amap.values[:, :, amap.values.shape[2] // 2])
    except OSError as exc:
        raise OSError(f"exporting activation map to {path}: {exc}") from exc
    return {"volume": str(header), "raw": str(header.with_suffix(".raw")), "slice": str(pgm)}


def load_map(header_path) -> ActivationMap:
    arr, header = read_volume(header_path)
    return ActivationMap(arr.astype(np.float64), arr.astype(np.float64), header.get("label", ""),
                         int(header.get("interval", 0)), header.get("patient_id", ""))


def localization_fraction(values, region, top_fraction: float = 0.1) -> float:
    """Share of the top-valued voxels that fall inside ``region``.

    Considers the ``top_fraction`` largest voxels among those with positive
    value. An all-zero map has no salient voxels and gives NaN.
    """
    v = np.asarray(values, dtype=float).ravel()
    region = np.asarray(region, dtype=bool).ravel()
    k = int(np.ceil(top_fraction * v.size))
    order = np.argsort(-v, kind="stable")[:k]
    order = order[v[order] > 0]
    if order.size == 0:
        return float("nan")
    return float(region[order].mean())


def normalized_l2(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0
