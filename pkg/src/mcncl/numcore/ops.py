"""Differentiable dense operations.

Broadcasting is limited to a trailing vector against the rows of a matrix
(bias-add and per-channel scaling); every other shape change is an explicit op.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from mcncl import kernels
from mcncl.numcore.tensor import ShapeError, TapeTensor, apply_op, constant


def _t(x) -> TapeTensor:
    return x if isinstance(x, TapeTensor) else constant(x)


def _row_broadcast(a: TapeTensor, b: TapeTensor, opname: str) -> bool:
    if a.shape == b.shape:
        return False
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise ShapeError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}")


def add(a, b) -> TapeTensor:
    a, b = _t(a), _t(b)
    bcast = _row_broadcast(a, b, "add")

    def backward(g):
        return g, (g.sum(axis=0) if bcast else g)

    return apply_op(a.values + b.values, (a, b), backward)


def sub(a, b) -> TapeTensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return apply_op(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> TapeTensor:
    """Elementwise product; ``b`` may be a per-channel vector scaling every row."""
    a, b = _t(a), _t(b)
    bcast = _row_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        gb = g * av
        return g * bv, (gb.sum(axis=0) if bcast else gb)

    return apply_op(av * bv, (a, b), backward)


def scale(a, c: float) -> TapeTensor:
    a = _t(a)
    c = float(c)
    return apply_op(a.values * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> TapeTensor:
    a, b = _t(a), _t(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values
    return apply_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> TapeTensor:
    a = _t(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return apply_op(a.values.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> TapeTensor:
    a = _t(a)
    old = a.shape
    return apply_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def linear(x, weight, bias) -> TapeTensor:
    """``x @ weight + bias`` for x (n, d_in), weight (d_in, d_out), bias (d_out,)."""
    x, weight, bias = _t(x), _t(weight), _t(bias)
    if x.values.ndim != 2 or weight.values.ndim != 2 or bias.values.ndim != 1:
        raise ShapeError(
            f"linear: expected matrix, matrix, vector; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"linear: bias length {bias.shape[0]} != weight columns {weight.shape[1]}")
    xv, wv = x.values, weight.values

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return apply_op(xv @ wv + bias.values, (x, weight, bias), backward)


def relu(x) -> TapeTensor:
    x = _t(x)
    active = x.values > 0
    # maximum keeps NaN visible; a where() on the mask would zero it silently
    return apply_op(np.maximum(x.values, 0.0), (x,), lambda g: (g * active,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> TapeTensor:
    x = _t(x)
    s = _sigmoid(x.values)
    return apply_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_lastdim(x, mask: Optional[np.ndarray] = None) -> TapeTensor:
    """Row softmax with max-subtraction.

    ``mask`` (bool, same shape) excludes entries, which then get probability 0.
    Every row must keep at least one entry.
    """
    x = _t(x)
    v = x.values
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax_lastdim: empty last dimension")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != {v.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_lastdim: a row has every entry masked out")
        v = np.where(mask, v, -np.inf)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply_op(y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> TapeTensor:
    x, gain, bias = _t(x), _t(gain), _t(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    v = x.values
    if v.ndim != 2 or gain.shape != (v.shape[1],) or bias.shape != (v.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = v.mean(axis=1, keepdims=True)
    centred = v - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv_std
    gv = gain.values

    def backward(g):
        gx_hat = g * gv
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return apply_op(xhat * gv + bias.values, (x, gain, bias), backward)


def l2_normalize(x) -> TapeTensor:
    """Scale a vector, or each row of a matrix, to unit Euclidean norm."""
    x = _t(x)
    v = x.values
    if v.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: expected vector or matrix, got shape {x.shape}")
    rows = v.reshape(1, -1) if v.ndim == 1 else v
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        where = "vector" if v.ndim == 1 else f"row {int(zero[0])}"
        raise ValueError(f"l2_normalize: zero-norm {where}")
    out = rows / norms

    def backward(g):
        g2 = g.reshape(out.shape)
        gx = (g2 - out * (g2 * out).sum(axis=1, keepdims=True)) / norms
        return (gx.reshape(v.shape),)

    return apply_op(out.reshape(v.shape), (x,), backward)


def conv1d(x, kernel, bias=None) -> TapeTensor:
    """Same-padded temporal cross-correlation.

    x (L, c_in), kernel (k, c_in, c_out) with k odd, bias (c_out,).
    """
    x, kernel = _t(x), _t(kernel)
    if kernel.values.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be (k, c_in, c_out), got {kernel.shape}")
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d: kernel size {k} is even; same-padding needs an odd size")
    if x.values.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    bias = constant(np.zeros(c_out)) if bias is None else _t(bias)
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} != ({c_out},)")
    xv, kv = x.values, kernel.values
    out = kernels.conv1d_forward(xv, kv, bias.values)

    def backward(g):
        return kernels.conv1d_backward(np.ascontiguousarray(g), xv, kv)

    return apply_op(out, (x, kernel, bias), backward)


def conv1d_grouped(x, group_kernels: Sequence, group_biases: Sequence) -> TapeTensor:
    """Split channels into ``len(group_kernels)`` contiguous groups and convolve each."""
    x = _t(x)
    n_groups = len(group_kernels)
    if n_groups == 0 or len(group_biases) != n_groups:
        raise ValueError("conv1d_grouped: need one kernel and one bias per group")
    channels = x.shape[1]
    if channels % n_groups:
        raise ValueError(f"conv1d_grouped: {channels} channels not divisible by {n_groups} groups")
    width = channels // n_groups
    outs = [
        conv1d(slice_cols(x, s * width, (s + 1) * width), kern, b)
        for s, (kern, b) in enumerate(zip(group_kernels, group_biases))
    ]
    return outs[0] if n_groups == 1 else concat_cols(outs)


def concat_cols(tensors: Sequence) -> TapeTensor:
    ts = [_t(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1 or any(t.values.ndim != 2 for t in ts):
        raise ShapeError(f"concat_cols: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts))]

    return apply_op(np.concatenate([t.values for t in ts], axis=1), ts, backward)


def slice_cols(x, start: int, stop: int) -> TapeTensor:
    x = _t(x)
    if x.values.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return apply_op(x.values[:, start:stop].copy(), (x,), backward)


def gather_rows(x, index) -> TapeTensor:
    """``out[r] = x[index[r]]``; indices may repeat."""
    x = _t(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return apply_op(x.values[index], (x,), backward)


def scatter_rows(x, index, n_rows: int) -> TapeTensor:
    """Place row r of ``x`` at ``index[r]`` of a zero matrix with ``n_rows`` rows."""
    x = _t(x)
    index = np.asarray(index, dtype=np.int64)
    if len(np.unique(index)) != len(index) or index.shape[0] != x.shape[0]:
        raise ValueError("scatter_rows: need one distinct target row per input row")
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.values
    return apply_op(out, (x,), lambda g: (g[index],))


def segment_mean(x, segment_ids, n_segments: int) -> TapeTensor:
    """Mean of the rows sharing each segment id; every segment must be non-empty."""
    x = _t(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: {seg.shape[0]} ids for {x.shape[0]} rows")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if counts.shape[0] != n_segments or (counts == 0).any():
        raise ValueError("segment_mean: empty or out-of-range segment")
    out = np.zeros((n_segments, x.shape[1]))
    np.add.at(out, seg, x.values)
    out /= counts[:, None]
    return apply_op(out, (x,), lambda g: ((g / counts[:, None])[seg],))


def mean_rows(x) -> TapeTensor:
    """Average over the first axis: (L, C) -> (C,)."""
    x = _t(x)
    n = x.shape[0]
    if n == 0:
        raise ValueError("mean_rows: no rows")
    return apply_op(x.values.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def sum_all(x) -> TapeTensor:
    x = _t(x)
    shape = x.shape
    return apply_op(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x) -> TapeTensor:
    x = _t(x)
    return scale(sum_all(x), 1.0 / x.values.size)


def cross_entropy_logits(logits, labels) -> TapeTensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits), via log-sum-exp."""
    logits = _t(logits)
    v = logits.values
    if v.ndim == 1:
        v = v.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = v.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if ((labels < 0) | (labels >= k)).any():
        raise ValueError(f"cross_entropy: label out of range 0..{k - 1}")
    m = v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(v - m).sum(axis=1)) + m[:, 0]
    nll = lse - v[np.arange(n), labels]
    probs = np.exp(v - lse[:, None])
    shape = logits.shape

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g / n) * d.reshape(shape),)

    return apply_op(np.asarray(nll.mean()), (logits,), backward)
