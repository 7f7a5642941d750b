"""Small define-by-run reverse-mode differentiation engine over numpy arrays.

Only the handful of operations needed by the survival network and the
saliency maps are provided. Every array is float64. A :class:`Tape` is
created per forward pass; operations append entries to it and
:meth:`Tape.backward` replays their adjoints in reverse order.

Tensors may carry a leading batch axis: ``dense`` takes ``[n, d]``,
``conv3d`` takes ``[c, X, Y, Z]`` or ``[n, c, X, Y, Z]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, UsageError


_param_counter = itertools.count()


class Parameter:
    """Trainable array with a gradient accumulator of the same shape."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.uid = next(_param_counter)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tensor:
    """A value recorded on a tape. Treat ``data`` as read-only."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.data.shape})"


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[int, ...]
    output: int
    adjoint: Callable  # (g_out, guided) -> tuple of input grads (None = no flow)
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._values: list[np.ndarray] = []
        self._param_nodes: dict[int, int] = {}
        self._params: dict[int, Parameter] = {}

    def _new_node(self, data: np.ndarray) -> Tensor:
        self._values.append(data)
        return Tensor(data, self, len(self._values) - 1)

    def input(self, value) -> Tensor:
        """Register a leaf (data or intermediate constant) on this tape."""
        return self._new_node(np.array(value, dtype=np.float64))

    def watch(self, param: Parameter) -> Tensor:
        node = self._param_nodes.get(param.uid)
        if node is None:
            t = self._new_node(param.value)
            self._param_nodes[param.uid] = t.id
            self._params[t.id] = param
            return t
        return Tensor(self._values[node], self, node)

    def record(self, kind, inputs: Sequence[Tensor], out: np.ndarray, adjoint, **saved) -> Tensor:
        t = self._new_node(out)
        for x in inputs:
            if x.id >= t.id:
                raise UsageError("tape order violated")
        self.entries.append(TapeEntry(kind, tuple(x.id for x in inputs), t.id, adjoint, saved))
        return t

    def backward(self, seed: Tensor, guided: bool = False, accumulate: bool = True) -> dict[int, np.ndarray]:
        """Propagate d(seed)/d(node) to every node the seed depends on.

        Returns a mapping node id -> gradient. When ``accumulate`` is true the
        gradients of watched parameters are added into ``Parameter.grad``.
        With ``guided=True`` every ReLU adjoint passes only positions whose
        forward input was positive and whose incoming gradient is positive.
        """
        if seed.tape is not self:
            raise UsageError("seed belongs to a different tape")
        if seed.data.size != 1:
            raise UsageError(f"backward seed must be scalar, got shape {seed.data.shape}")
        grads: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.data)}
        for entry in reversed(self.entries):
            g = grads.get(entry.output)
            if g is None:
                continue
            in_grads = entry.adjoint(g, guided)
            for node, gi in zip(entry.inputs, in_grads):
                if gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        if accumulate:
            for node, param in self._params.items():
                if node in grads:
                    param.grad += grads[node]
        return grads

    def grad_of(self, grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
        """Gradient for ``t`` from a ``backward`` result (zeros if unreached)."""
        return grads.get(t.id, np.zeros_like(t.data))


def _as_node(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise UsageError("tensors from different tapes")
        return x
    if isinstance(x, Parameter):
        return tape.watch(x)
    raise TypeError(f"expected Tensor or Parameter, got {type(x).__name__}")


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise UsageError("at least one argument must be a Tensor on a tape")


# --------------------------------------------------------------------------
# operations


def dense(x, weights, bias) -> Tensor:
    """``x @ W + b`` for ``x`` of shape ``[n, d_in]`` (or ``[d_in]``)."""
    tape = _tape_of(x, weights, bias)
    x, W, b = (_as_node(v, tape) for v in (x, weights, bias))
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[0] or b.data.shape != (W.data.shape[1],):
        raise DimensionError(
            f"dense: input {x.data.shape} incompatible with weights {W.data.shape} / bias {b.data.shape}"
        )
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    def adjoint(g, guided):
        if xd.ndim == 1:
            gW = np.outer(xd, g)
            gb = g
        else:
            gW = xd.T @ g
            gb = g.sum(axis=0)
        return g @ Wd.T, gW, gb

    return tape.record("dense", (x, W, b), out, adjoint)


def _conv_out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv3d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation.

    ``x``: ``[c_in, X, Y, Z]`` or ``[n, c_in, X, Y, Z]``; ``kernels``:
    ``[c_out, c_in, k, k, k]`` with odd ``k``.
    """
    tape = _tape_of(x, kernels, bias)
    x, Wt, b = (_as_node(v, tape) for v in (x, kernels, bias))
    xd, Wd = x.data, Wt.data
    unbatched = xd.ndim == 4
    if unbatched:
        xd = xd[None]
    if xd.ndim != 5 or Wd.ndim != 5:
        raise DimensionError(f"conv3d: input {x.data.shape} / kernels {Wd.shape} have wrong rank")
    c_out, c_in, k = Wd.shape[0], Wd.shape[1], Wd.shape[2]
    if Wd.shape[2:] != (k, k, k) or k % 2 != 1:
        raise ConfigurationError(f"conv3d: kernel must be cubic with odd extent, got {Wd.shape}")
    if xd.shape[1] != c_in or b.data.shape != (c_out,):
        raise DimensionError(f"conv3d: input {x.data.shape} incompatible with kernels {Wd.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv3d: invalid stride {stride} / padding {padding}")
    outs = tuple(_conv_out_extent(s, k, stride, padding) for s in xd.shape[2:])
    if min(outs) < 1:
        raise ConfigurationError(f"conv3d: non-positive output extent {outs} for input {xd.shape[2:]}")
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    X, Y, Z = outs
    span = lambda o, s: slice(o, o + stride * (s - 1) + 1, stride)  # noqa: E731

    # windows[n, c_in, X, Y, Z, k, k, k]: the input patch seen by each output voxel
    windows = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    out = np.tensordot(windows, Wd, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
    out += b.data[None, :, None, None, None]
    result = np.ascontiguousarray(out[0] if unbatched else out)

    def adjoint(g, guided):
        g5 = g[None] if unbatched else g
        gW = np.tensordot(g5, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gwin = np.tensordot(g5, Wd, axes=([1], [0]))  # [n, X, Y, Z, c_in, k, k, k]
        gwin = np.moveaxis(gwin, 4, 1)
        gxp = np.zeros_like(xp)
        for a, bb, c in itertools.product(range(k), repeat=3):
            gxp[:, :, span(a, X), span(bb, Y), span(c, Z)] += gwin[..., a, bb, c]
        gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3], p:p + xd.shape[4]] if p else gxp
        gb = g5.sum(axis=(0, 2, 3, 4))
        return (gx[0] if unbatched else gx), gW, gb

    return tape.record("conv3d", (x, Wt, b), result, adjoint, stride=stride, padding=padding)


def relu(x) -> Tensor:
    tape = _tape_of(x)
    x = _as_node(x, tape)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def adjoint(g, guided):
        if guided:
            return (np.where(mask & (g > 0), g, 0.0),)
        return (np.where(mask, g, 0.0),)

    return tape.record("relu", (x,), out, adjoint, mask=mask)


def global_avg_pool(x) -> Tensor:
    """Spatial mean: ``[c, X, Y, Z] -> [c]`` or ``[n, c, X, Y, Z] -> [n, c]``."""
    tape = _tape_of(x)
    x = _as_node(x, tape)
    shape = x.data.shape
    if len(shape) not in (4, 5):
        raise DimensionError(f"global_avg_pool expects rank 4 or 5, got {shape}")
    count = shape[-1] * shape[-2] * shape[-3]
    out = x.data.mean(axis=(-3, -2, -1))

    def adjoint(g, guided):
        return (np.broadcast_to((g / count)[..., None, None, None], shape).copy(),)

    return tape.record("global_avg_pool", (x,), out, adjoint)


def concat(a, b) -> Tensor:
    """Concatenate along the last (feature) axis."""
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(f"concat: leading shapes differ {a.data.shape} vs {b.data.shape}")
    da = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def adjoint(g, guided):
        return g[..., :da], g[..., da:]

    return tape.record("concat", (a, b), out, adjoint)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes differ {a.data.shape} vs {b.data.shape}")
    return tape.record("add", (a, b), a.data + b.data, lambda g, guided: (g, g))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes differ {a.data.shape} vs {b.data.shape}")
    return tape.record("sub", (a, b), a.data - b.data, lambda g, guided: (g, -g))


def scale(a, c: float) -> Tensor:
    tape = _tape_of(a)
    a = _as_node(a, tape)
    c = float(c)
    return tape.record("scale", (a,), a.data * c, lambda g, guided: (g * c,))


def mul_const(a, const) -> Tensor:
    """Elementwise product with a constant (broadcast) array."""
    tape = _tape_of(a)
    a = _as_node(a, tape)
    const = np.asarray(const, dtype=np.float64)
    out = a.data * const
    shape = a.data.shape

    def adjoint(g, guided):
        ga = g * const
        if ga.shape != shape:
            ga = _unbroadcast(ga, shape)
        return (ga,)

    return tape.record("mul_const", (a,), out, adjoint)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def total(a) -> Tensor:
    """Sum of all entries (scalar)."""
    tape = _tape_of(a)
    a = _as_node(a, tape)
    shape = a.data.shape
    return tape.record("sum", (a,), np.asarray(a.data.sum()), lambda g, guided: (np.full(shape, float(g)),))


def weighted_sum(a, w) -> Tensor:
    """``sum(a * w)`` for a constant weight array ``w`` (scalar result)."""
    tape = _tape_of(a)
    a = _as_node(a, tape)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), a.data.shape)
    return tape.record("weighted_sum", (a,), np.asarray((a.data * w).sum()),
                       lambda g, guided: (float(g) * w,))


def sum_squares(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_node(a, tape)
    ad = a.data
    return tape.record("sum_squares", (a,), np.asarray((ad * ad).sum()), lambda g, guided: (2.0 * float(g) * ad,))


def reverse_cumsum_pad(a) -> Tensor:
    """``[..., m] -> [..., m+1]`` with ``out[i] = sum_{k>=i} a[k]`` and ``out[m] = 0``.

    Turns per-time-point logits into the scores of the ``m+1`` monotone
    (cumulative) binary sequences.
    """
    tape = _tape_of(a)
    a = _as_node(a, tape)
    rc = np.flip(np.cumsum(np.flip(a.data, -1), -1), -1)
    out = np.concatenate([rc, np.zeros(a.data.shape[:-1] + (1,))], axis=-1)

    def adjoint(g, guided):
        return (np.cumsum(g[..., :-1], axis=-1),)

    return tape.record("reverse_cumsum_pad", (a,), out, adjoint)


def logsumexp(a, mask=None) -> Tensor:
    """Stabilized log-sum-exp over the last axis, optionally restricted to ``mask``."""
    tape = _tape_of(a)
    a = _as_node(a, tape)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise UsageError("logsumexp: empty mask row")
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(xm - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    soft = e / s

    def adjoint(g, guided):
        return (soft * np.asarray(g)[..., None],)

    return tape.record("logsumexp", (a,), out, adjoint)


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` receives a leaf Tensor holding ``point`` and must return a scalar
    Tensor on the same tape. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.input(point)
    y = fn(x)
    analytic = tape.grad_of(tape.backward(y, accumulate=False), x)

    def value(p):
        t = Tape()
        return float(fn(t.input(p)).data)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(point)
        flat[i] = orig - h
        fm = value(point)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[Tape], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """As :func:`grad_check` but over every entry of ``params``.

    ``loss_fn`` builds a fresh computation on the tape it is handed.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(Tape()).data)
            flat[i] = orig - h
            fm = float(loss_fn(Tape()).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
