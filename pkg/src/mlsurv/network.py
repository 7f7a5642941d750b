"""CNN + FC fusion + per-label MTLR model, its optimizer and training loop.

Forward pass::

    h = relu(W_fc [clinical || avgpool(cnn(volume))] + b_fc)
    scores_s = MTLR_s(h)          for each survival label s

The CNN is a stack of conv3d + ReLU layers. Modality ablations zero one
block of the concatenated input rather than changing any shapes.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import mtlr
from .data.cohort import Cohort
from .encoding import LABELS, TimeGrid
from .errors import CheckpointError, ConfigurationError, TrainingError

log = logging.getLogger(__name__)

MODALITIES = ("multimodal", "clinical", "image")


@dataclass
class EncoderConfig:
    volume_extents: tuple = (16, 16, 8)
    in_channels: int = 2
    conv_channels: tuple = (8, 16, 32, 64)
    conv_strides: tuple = (2, 2, 2, 2)
    kernel: int = 3
    padding: int = 1
    fc_width: int = 64
    clinical_width: int = 11
    labels: tuple = LABELS
    K: int = 16
    modality: str = "multimodal"
    seed: int = 0

    def __post_init__(self):
        self.volume_extents = tuple(int(v) for v in self.volume_extents)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.conv_strides = tuple(int(v) for v in self.conv_strides)
        self.labels = tuple(self.labels)
        if len(self.conv_channels) != len(self.conv_strides) or not self.conv_channels:
            raise ConfigurationError("conv_channels and conv_strides must have the same non-zero length")
        if min(self.volume_extents + self.conv_channels + self.conv_strides) < 1:
            raise ConfigurationError("extents, channels and strides must be positive")
        if self.kernel % 2 != 1 or self.padding < 0:
            raise ConfigurationError("kernel must be odd and padding non-negative")
        if self.K < 2 or not self.labels or self.fc_width < 1 or self.clinical_width < 0:
            raise ConfigurationError("need K >= 2, at least one label and a positive FC width")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        self.coarse_extents()

    def coarse_extents(self) -> tuple:
        ext = self.volume_extents
        for s in self.conv_strides:
            ext = tuple((e + 2 * self.padding - self.kernel) // s + 1 for e in ext)
            if min(ext) < 1:
                raise ConfigurationError(f"volume {self.volume_extents} collapses to {ext} inside the encoder")
        return ext


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    weight_decay: float = 0.01
    label_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    beta: float = 1.0
    augment: bool = True
    max_rotation_deg: float = 10.0
    max_shift_vox: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.label_weights = tuple(float(v) for v in self.label_weights)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.plateau_patience < 0:
            raise ConfigurationError("learning rate, batch size, epochs and patience out of range")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau factor must lie in (0, 1)")
        if self.weight_decay < 0 or self.beta < 0 or min(self.label_weights, default=0) < 0:
            raise ConfigurationError("weight decay, beta and label weights must be non-negative")


class SurvivalModel:
    def __init__(self, config: EncoderConfig, grid: TimeGrid):
        if grid.K != config.K:
            raise ConfigurationError(f"grid has K={grid.K} but config says K={config.K}")
        self.config = config
        self.grid = grid
        self.epoch = 0
        self.normalization: Optional[dict] = None  # clinical scaling fitted on the training split
        self.params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(config.seed)
        c_prev, k = config.in_channels, config.kernel
        for i, c in enumerate(config.conv_channels):
            fan_in = c_prev * k ** 3
            self._add(f"conv{i}.weight", _he_uniform(rng, (c, c_prev, k, k, k), fan_in))
            self._add(f"conv{i}.bias", np.zeros(c))
            c_prev = c
        d_in = config.clinical_width + c_prev
        self._add("fc.weight", _he_uniform(rng, (d_in, config.fc_width), d_in))
        self._add("fc.bias", np.zeros(config.fc_width))
        for lab in config.labels:
            self._add(f"mtlr.{lab}.theta", np.zeros((config.fc_width, config.K - 1)))
            self._add(f"mtlr.{lab}.bias", np.zeros(config.K - 1))

    def _add(self, name, value):
        self.params[name] = ad.Parameter(value, name)

    @property
    def n_conv(self):
        return len(self.config.conv_channels)

    @property
    def labels(self):
        return self.config.labels

    def heads(self, label_weights=None, beta: float = 1.0) -> mtlr.MtlrHeads:
        if label_weights is None:
            label_weights = np.ones(len(self.labels))
        return mtlr.MtlrHeads(
            [self.params[f"mtlr.{lab}.theta"] for lab in self.labels],
            [self.params[f"mtlr.{lab}.bias"] for lab in self.labels],
            label_weights, beta,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            p = self.params[k]
            if p.value.shape != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: model {p.value.shape}, given {v.shape}")
            p.value = np.array(v, dtype=np.float64)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ForwardPass:
    tape: ad.Tape
    nodes: dict
    scores: list  # Tensor [n, K] per label
    logits: list  # Tensor [n, K-1] per label
    single: bool = False

    def curves(self) -> list[mtlr.PredictedCurve]:
        """One curve per label; arrays lose the batch axis for single-patient passes."""
        return [mtlr.curve_from_scores(s.data[0] if self.single else s.data) for s in self.scores]


def forward(model: SurvivalModel, volume, clinical, tape: Optional[ad.Tape] = None) -> ForwardPass:
    """Run the model on one patient (``[2, X, Y, Z]``, ``[11]``) or a batch."""
    cfg = model.config
    volume = np.asarray(volume, dtype=np.float64)
    clinical = np.asarray(clinical, dtype=np.float64)
    single = volume.ndim == 4
    if single:
        volume, clinical = volume[None], clinical[None]
    if volume.ndim != 5 or volume.shape[1] != cfg.in_channels or volume.shape[2:] != cfg.volume_extents:
        raise ConfigurationError(
            f"volume shape {volume.shape[1:]} does not match ({cfg.in_channels}, *{cfg.volume_extents})")
    if clinical.shape != (volume.shape[0], cfg.clinical_width):
        raise ConfigurationError(f"clinical shape {clinical.shape[1:]} does not match ({cfg.clinical_width},)")
    tape = tape or ad.Tape()
    P = model.params
    nodes = {"volume": tape.input(volume)}
    n = volume.shape[0]
    if cfg.modality == "clinical":
        # image branch contributes a constant zero block; skip the CNN
        pooled = tape.input(np.zeros((n, cfg.conv_channels[-1])))
    else:
        h = nodes["volume"]
        for i, stride in enumerate(cfg.conv_strides):
            h = ad.relu(ad.conv3d(h, P[f"conv{i}.weight"], P[f"conv{i}.bias"], stride, cfg.padding))
        nodes["last_conv"] = h
        pooled = ad.global_avg_pool(h)
    nodes["clinical"] = tape.input(clinical)
    clin = nodes["clinical"]
    if cfg.modality == "image":
        clin = ad.mul_const(clin, 0.0)
    fused = ad.concat(clin, pooled)
    feats = ad.relu(ad.dense(fused, P["fc.weight"], P["fc.bias"]))
    nodes["features"] = feats
    logits, scores = [], []
    for lab in cfg.labels:
        lg = ad.dense(feats, P[f"mtlr.{lab}.theta"], P[f"mtlr.{lab}.bias"])
        logits.append(lg)
        scores.append(ad.reverse_cumsum_pad(lg))
    return ForwardPass(tape, nodes, scores, logits, single)


def predict(model: SurvivalModel, volumes, clinical, batch_size: int = 256) -> np.ndarray:
    """Sequence scores ``[n, S, K]`` for a batch of patients."""
    out = []
    for i in range(0, len(volumes), batch_size):
        fp = forward(model, volumes[i:i + batch_size], clinical[i:i + batch_size])
        out.append(np.stack([s.data for s in fp.scores], axis=1))
    return np.concatenate(out, axis=0)


def predict_cohort(model: SurvivalModel, cohort: Cohort, batch_size: int = 256):
    """Per-label survival curves ``[n, S, K]`` and lifetime risks ``[n, S]``."""
    scores = predict(model, cohort.volumes, cohort.clinical, batch_size)
    surv = mtlr.survival_from_pmf(mtlr.pmf_from_scores(scores))
    return surv, mtlr.risk_scores(surv, model.grid)


def batch_loss(model: SurvivalModel, volumes, clinical, masks, label_weights, beta, tape=None):
    fp = forward(model, volumes, clinical, tape)
    return mtlr.multi_label_loss(fp.nodes["features"], model.heads(label_weights, beta), masks), fp


# --------------------------------------------------------------------------
# optimizer


def adamw_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One AdamW update with bias-corrected moments and decoupled decay.

    ``t`` is the 1-based step count. Returns ``(value, m, v)``.
    """
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    value = value - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * value
    return value, m, v


class AdamW:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            p.value, self.m[k], self.v[k] = adamw_step(
                p.value, p.grad, self.m[k], self.v[k], self.t, self.lr,
                self.betas[0], self.betas[1], self.eps, self.weight_decay)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: SurvivalModel
    history: list = field(default_factory=list)
    best_epoch: int = 0


def cohort_masks(model: SurvivalModel, cohort: Cohort):
    return mtlr.targets_to_masks(model.grid, cohort.times, cohort.events, cohort.ids, cohort.labels)


def evaluate_loss(model, cohort: Cohort, tc: TrainConfig, masks=None) -> float:
    masks = cohort_masks(model, cohort) if masks is None else masks
    n = len(cohort)
    total = 0.0
    # likelihood term is averaged per batch; weight by batch size for the mean
    for i in range(0, n, tc.batch_size):
        sl = slice(i, i + tc.batch_size)
        loss, _ = batch_loss(model, cohort.volumes[sl], cohort.clinical[sl], [m[sl] for m in masks],
                             tc.label_weights, 0.0)
        total += float(loss.data) * len(cohort.volumes[sl])
    reg = 0.5 * tc.beta * sum(float((model.params[f"mtlr.{lab}.theta"].value ** 2).sum()) for lab in model.labels)
    return total / n + reg


def train(model: SurvivalModel, train_cohort: Cohort, val_cohort: Cohort, tc: TrainConfig) -> TrainResult:
    """Mini-batch AdamW on the multi-label loss with plateau LR decay.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    if len(train_cohort) == 0 or len(val_cohort) == 0:
        raise ConfigurationError("training and validation cohorts must be non-empty")
    if len(tc.label_weights) != len(model.labels):
        raise ConfigurationError(f"{len(tc.label_weights)} label weights for {len(model.labels)} labels")
    from .data.volume import augment

    rng = np.random.default_rng(tc.seed)
    opt = AdamW(model.params, lr=tc.lr, weight_decay=tc.weight_decay)
    train_masks = cohort_masks(model, train_cohort)
    val_masks = cohort_masks(model, val_cohort)
    n = len(train_cohort)
    best, best_state, best_epoch, bad = np.inf, model.state(), 0, 0
    history = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        running, count = 0.0, 0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = np.sort(order[start:start + tc.batch_size])
            vols = train_cohort.volumes[idx]
            if tc.augment and model.config.modality != "clinical":
                vols = np.stack([augment(v, rng, tc.max_rotation_deg, tc.max_shift_vox) for v in vols])
            model.zero_grad()
            loss, fp = batch_loss(model, vols, train_cohort.clinical[idx], [m[idx] for m in train_masks],
                                  tc.label_weights, tc.beta)
            value = float(loss.data)
            if not np.isfinite(value):
                name, norm = max(((k, float(np.linalg.norm(p.value))) for k, p in model.params.items()),
                                 key=lambda kv: kv[1] if np.isfinite(kv[1]) else np.inf)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}; "
                                    f"largest parameter norm {name}={norm:.3g}")
            fp.tape.backward(loss)
            opt.step()
            running += value * len(idx)
            count += len(idx)
        model.epoch += 1
        val = evaluate_loss(model, val_cohort, tc, val_masks)
        history.append(EpochLog(epoch, running / count, val, opt.lr))
        log.debug("epoch %d train %.5f val %.5f lr %.2g", epoch, running / count, val, opt.lr)
        if val < best:
            best, best_state, best_epoch, bad = val, model.state(), epoch, 0
        else:
            bad += 1
            if bad > tc.plateau_patience:
                opt.lr *= tc.plateau_factor
                bad = 0
    model.load_state(best_state)
    return TrainResult(model, history, best_epoch)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MLSURVCK"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def save_checkpoint(model: SurvivalModel, path):
    header = {"config": config_to_dict(model.config), "grid": list(model.grid.boundaries), "epoch": model.epoch}
    if model.normalization is not None:
        header["normalization"] = dict(model.normalization)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    hj = _canonical_json(header)
    buf.write(struct.pack("<Q", len(hj)))
    buf.write(hj)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, config: Optional[EncoderConfig] = None) -> SurvivalModel:
    """Read a checkpoint. With ``config`` the tensors must fit a model built from it."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        stored_cfg = EncoderConfig(**header["config"])
        grid = TimeGrid(tuple(header["grid"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model = SurvivalModel(config or stored_cfg, grid)
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for tensor {name}: checkpoint {tensors[name].shape}, model {p.value.shape}")
    extra = set(tensors) - set(model.params)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors {sorted(extra)}")
    model.load_state(tensors)
    model.epoch = int(header.get("epoch", 0))
    model.normalization = header.get("normalization")
    return model
