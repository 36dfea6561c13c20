"""Differentiable operations on :class:`Tensor`.

Every operation checks shapes explicitly. The only implicit broadcast is a
rank-1 right operand matched against the trailing axis of the left operand
(bias addition, per-channel scaling).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor

ACTIVATIONS = ("relu", "gelu", "tanh", "sigmoid")


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """Return True when ``b`` is a trailing-axis vector for ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_rows(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# --- elementwise arithmetic ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast("add", a, b)
    n = b.shape[0] if bcast else 0

    def backward(g):
        return g, (_reduce_rows(g, n) if bcast else g)

    return Tensor._from_op(a.data + b.data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast("sub", a, b)
    n = b.shape[0] if bcast else 0

    def backward(g):
        return g, (-_reduce_rows(g, n) if bcast else -g)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast("mul", a, b)
    n = b.shape[0] if bcast else 0
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_rows(gb, n) if bcast else gb)

    return Tensor._from_op(ad * bd, "mul", (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, "neg", (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data + x.dtype.type(c), "add_scalar", (x,), lambda g: (g,))


# --- linear algebra and shape ops ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, "matmul", (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected rank 2, got shape {x.shape}")
    return Tensor._from_op(x.data.T, "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(src),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), "sum", (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError(f"mean over an empty domain of shape {x.shape}")
    return scale(sum(x, axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, backward)


def getitem(x: Tensor, key) -> Tensor:
    """Indexing (basic or integer-array); gradients scatter-add back."""
    if isinstance(key, Tensor):
        raise TypeError("index with integers, slices or integer arrays, not tensors")
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return Tensor._from_op(out.copy(), "getitem", (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    return getitem(table, ids)


# --- normalization ---------------------------------------------------------------

def softmax(x: Tensor, axis: int | None = -1) -> Tensor:
    """Exp-normalize over ``axis``; ``axis=None`` normalizes over all entries."""
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DimensionError(f"softmax over an empty domain (shape {x.shape})")
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax: a normalization domain has no finite entry")
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._from_op(y, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over an empty domain (shape {x.shape})")
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    shifted = d - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, "log_softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    if eps < 0:
        raise ValueError(f"layer_norm: eps must be non-negative, got {eps}")
    if d == 1 and eps == 0:
        raise ValueError("layer_norm: width 1 with eps=0 has zero variance")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise ValueError("layer_norm: zero-variance row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, _reduce_rows(g * xhat, d), _reduce_rows(g, d)

    return Tensor._from_op(xhat * gd + bd, "layer_norm", (x, gamma, beta), backward)


# --- nonlinearities ----------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu``, ``gelu`` (exact Gaussian CDF), ``tanh`` or ``sigmoid``."""
    d = x.data
    if kind == "relu":
        on = d > 0
        return Tensor._from_op(np.where(on, d, 0).astype(d.dtype), "relu", (x,), lambda g: (g * on,))
    if kind == "gelu":
        cdf = 0.5 * (1.0 + special.erf(d * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return Tensor._from_op(d * cdf, "gelu", (x,), lambda g: (g * (cdf + d * pdf),))
    if kind == "tanh":
        y = np.tanh(d)
        return Tensor._from_op(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = special.expit(d)
        return Tensor._from_op(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return Tensor._from_op(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return Tensor._from_op(np.where(mask, x.dtype.type(value), x.data), "masked_fill", (x,), lambda g: (g * keep,))


# --- convolutional ops -------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of one ``C x H x W`` map with ``O x C x kh x kw`` filters."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} filters")
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[1:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(o, ho, wo)

    def backward(g):
        gm = g.reshape(o, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ gm).reshape(c, kh, kw, ho, wo)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        gx = dxp[:, p:p + h, p:p + w] if p else dxp
        grads = (gx, gw)
        return grads + ((gm.sum(axis=1),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out, "conv2d", inputs, backward)


def upsample_nearest(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of a ``C x H x W`` map to ``out_hw``."""
    if x.ndim != 3:
        raise DimensionError(f"upsample_nearest: expected C x H x W, got {x.shape}")
    c, h, w = x.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    rows = (np.arange(ho) * h) // ho
    cols = (np.arange(wo) * w) // wo
    idx = (slice(None), rows[:, None], cols[None, :])
    shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(x.data[idx], "upsample_nearest", (x,), backward)


def _bilinear_axis_weights(coords: np.ndarray, size: int, dtype) -> np.ndarray:
    """Interpolation weights along one axis, ``len(coords) x size``.

    Follows the usual RoIAlign border rule: samples beyond one cell outside the
    map contribute zero, samples inside ``[-1, 0)`` clamp to the first cell.
    """
    wts = np.zeros((coords.shape[0], size), dtype=dtype)
    valid = (coords >= -1.0) & (coords <= size)
    c = np.clip(coords, 0.0, None)
    low = np.floor(c).astype(np.int64)
    top = low >= size - 1
    low = np.where(top, size - 1, low)
    high = np.where(top, size - 1, low + 1)
    c = np.where(top, low.astype(c.dtype), c)
    frac = c - low
    rows = np.nonzero(valid)[0]
    np.add.at(wts, (rows, low[rows]), 1.0 - frac[rows])
    np.add.at(wts, (rows, high[rows]), frac[rows])
    return wts


def roi_align_weights(boxes: np.ndarray, map_hw: tuple[int, int], output_size: tuple[int, int],
                      sampling_ratio: int, spatial_scale: float, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Per-box averaging matrices ``(n x ph x H, n x pw x W)`` such that the pooled
    map is ``Ay @ F @ Ax.T`` for every channel ``F``.

    Box corners are continuous image coordinates; feature cell ``j`` covers
    ``[j, j + 1)`` in map units, so sample points shift by half a cell.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = map_hw
    ph, pw = output_size
    sr = int(sampling_ratio)
    if ph < 1 or pw < 1 or sr < 1:
        raise ConfigurationError(f"roi_align: bad output_size {output_size} or sampling_ratio {sampling_ratio}")
    n = boxes.shape[0]
    ay = np.zeros((n, ph, h), dtype=dtype)
    ax = np.zeros((n, pw, w), dtype=dtype)
    offs = (np.arange(sr) + 0.5) / sr
    for k, (x1, y1, x2, y2) in enumerate(boxes):
        sx1, sy1, sx2, sy2 = x1 * spatial_scale, y1 * spatial_scale, x2 * spatial_scale, y2 * spatial_scale
        if sx2 <= 0 or sy2 <= 0 or sx1 >= w or sy1 >= h:
            raise ValueError(f"roi_align: box ({x1}, {y1}, {x2}, {y2}) lies outside the {h}x{w} feature map")
        bin_h = (sy2 - sy1) / ph
        bin_w = (sx2 - sx1) / pw
        ys = (sy1 + (np.arange(ph)[:, None] + offs[None, :]) * bin_h - 0.5).reshape(-1)
        xs = (sx1 + (np.arange(pw)[:, None] + offs[None, :]) * bin_w - 0.5).reshape(-1)
        ay[k] = _bilinear_axis_weights(ys, h, dtype).reshape(ph, sr, h).mean(axis=1)
        ax[k] = _bilinear_axis_weights(xs, w, dtype).reshape(pw, sr, w).mean(axis=1)
    return ay, ax


def roi_align(feature_map: Tensor, boxes, output_size: tuple[int, int] = (7, 7), sampling_ratio: int = 2,
              spatial_scale: float = 1.0) -> Tensor:
    """Pool ``n`` boxes from a ``C x H x W`` map into ``n x C x ph x pw``.

    Each bin averages ``sampling_ratio**2`` bilinear samples taken at regular
    offsets inside the bin; coordinates are never rounded. Gradients flow to
    the feature map only.
    """
    if feature_map.ndim != 3:
        raise DimensionError(f"roi_align: expected C x H x W map, got {feature_map.shape}")
    _, h, w = feature_map.shape
    ay, ax = roi_align_weights(boxes, (h, w), output_size, sampling_ratio, spatial_scale, feature_map.dtype)
    f = feature_map.data
    out = np.einsum("nph,chw,nqw->ncpq", ay, f, ax, optimize=True)

    def backward(g):
        return (np.einsum("nph,ncpq,nqw->chw", ay, g, ax, optimize=True),)

    return Tensor._from_op(out, "roi_align", (feature_map,), backward)


# --- losses --------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and soft targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {t.shape}")
    if t.size == 0:
        raise DimensionError("bce: empty input")
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError("bce: targets must lie in [0, 1]")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = t.size
    sig = special.expit(x)

    def backward(g):
        return (g * (sig - t) / n,)

    return Tensor._from_op(np.asarray(loss.mean()), "bce_with_logits", (logits,), backward)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean softmax cross-entropy of ``n x C`` logits against integer labels.

    Rows with weight 0 are ignored; the mean divides by the total weight.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError("cross_entropy: label out of range")
    wts = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = wts.sum()
    if total <= 0:
        raise ValueError("cross_entropy: total weight must be positive")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(wts * logp[rows, labels]).sum() / total

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d * (wts / total)[:, None],)

    return Tensor._from_op(np.asarray(loss), "cross_entropy", (logits,), backward)


__all__ = [
    "ACTIVATIONS", "activation", "add", "add_scalar", "as_tensor", "bce_with_logits", "concat",
    "conv2d", "cross_entropy", "dropout", "embedding", "gelu", "getitem", "layer_norm",
    "log_softmax", "masked_fill", "matmul", "mean", "mul", "neg", "relu", "reshape", "roi_align",
    "roi_align_weights", "scale", "sigmoid", "softmax", "sub", "sum", "tanh", "transpose",
    "upsample_nearest",
]
