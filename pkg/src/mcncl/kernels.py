"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public names (``conv1d_forward`` etc.) are bound to whichever backend
``mcncl._accel`` selected. Both flavours stay importable under explicit
``*_numpy`` / ``*_numba`` names so tests and the benchmark can compare them.
"""
import math

import numpy as np

from mcncl._accel import HAS_NUMBA, USE_NUMBA, njit

__all__ = [
    "conv1d_forward",
    "conv1d_backward",
    "hard_negative_mask",
    "supcon_terms",
    "hard_negative_count",
]


def _hard_count(n_neg, fraction):
    if n_neg == 0:
        return 0
    # the epsilon keeps e.g. 0.3 * 10 from flooring to 2 on representation error
    k = int(math.floor(fraction * n_neg + 1e-9))
    if k < 1:
        k = 1
    if k > n_neg:
        k = n_neg
    return k


def hard_negative_count(n_neg: int, fraction: float) -> int:
    """Number of hard negatives kept out of ``n_neg`` candidates."""
    return _hard_count(int(n_neg), float(fraction))


# ---------------------------------------------------------------------------
# same-padded temporal convolution (cross-correlation)
# ---------------------------------------------------------------------------


def conv1d_forward_numpy(x, w, b):
    L, ci = x.shape
    k, _, co = w.shape
    p = k // 2
    xp = np.zeros((L + 2 * p, ci))
    xp[p : p + L] = x
    out = np.empty((L, co))
    out[:] = b
    for j in range(k):
        out += xp[j : j + L] @ w[j]
    return out


def conv1d_backward_numpy(g, x, w):
    L, ci = x.shape
    k, _, co = w.shape
    p = k // 2
    xp = np.zeros((L + 2 * p, ci))
    xp[p : p + L] = x
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        gxp[j : j + L] += g @ w[j].T
        gw[j] = xp[j : j + L].T @ g
    return gxp[p : p + L].copy(), gw, g.sum(axis=0)


@njit(cache=True)
def _conv1d_forward_nb(x, w, b):
    L, ci = x.shape
    k, _, co = w.shape
    p = k // 2
    out = np.empty((L, co))
    for t in range(L):
        for o in range(co):
            out[t, o] = b[o]
        for j in range(k):
            s = t + j - p
            if s < 0 or s >= L:
                continue
            for i in range(ci):
                xv = x[s, i]
                for o in range(co):
                    out[t, o] += xv * w[j, i, o]
    return out


@njit(cache=True)
def _conv1d_backward_nb(g, x, w):
    L, ci = x.shape
    k, _, co = w.shape
    p = k // 2
    gx = np.zeros((L, ci))
    gw = np.zeros((k, ci, co))
    gb = np.zeros(co)
    for t in range(L):
        for o in range(co):
            gb[o] += g[t, o]
        for j in range(k):
            s = t + j - p
            if s < 0 or s >= L:
                continue
            for i in range(ci):
                xv = x[s, i]
                acc = 0.0
                for o in range(co):
                    gv = g[t, o]
                    acc += gv * w[j, i, o]
                    gw[j, i, o] += xv * gv
                gx[s, i] += acc
    return gx, gw, gb


# ---------------------------------------------------------------------------
# supervised contrastive terms
# ---------------------------------------------------------------------------


def hard_negative_mask_numpy(sim, labels, fraction):
    n = labels.shape[0]
    neg = labels[:, None] != labels[None, :]
    key = np.where(neg, -sim, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), (n, n)), axis=1)
    k = np.array([_hard_count(int(c), fraction) for c in neg.sum(axis=1)], dtype=np.int64)
    return neg & (rank < k[:, None])


@njit(cache=True)
def _hard_count_nb(n_neg, fraction):
    if n_neg == 0:
        return 0
    k = int(math.floor(fraction * n_neg + 1e-9))
    if k < 1:
        k = 1
    if k > n_neg:
        k = n_neg
    return k


@njit(cache=True)
def _hard_negative_mask_nb(sim, labels, fraction):
    n = labels.shape[0]
    mask = np.zeros((n, n), dtype=np.bool_)
    idx = np.empty(n, dtype=np.int64)
    key = np.empty(n)
    for i in range(n):
        cnt = 0
        for j in range(n):
            if labels[j] != labels[i]:
                idx[cnt] = j
                key[cnt] = -sim[i, j]
                cnt += 1
        k = _hard_count_nb(cnt, fraction)
        if k == 0:
            continue
        order = np.argsort(key[:cnt], kind="mergesort")
        for r in range(k):
            mask[i, idx[order[r]]] = True
    return mask


def supcon_terms_numpy(sim, labels, tau, neg_mask):
    """Per-anchor losses, contributing mask and d(loss_i)/d(sim_i.)."""
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    contrib = n_pos > 0
    incl = pos | neg_mask
    logits = sim / tau
    row_max = np.max(np.where(incl, logits, -np.inf), axis=1)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(np.where(incl, logits - row_max[:, None], -np.inf))
    denom = np.where(contrib, e.sum(axis=1), 1.0)
    safe_pos = np.maximum(n_pos, 1)
    pos_mean = (logits * pos).sum(axis=1) / safe_pos
    per = np.where(contrib, np.log(denom) + row_max - pos_mean, 0.0)
    coef = (e / denom[:, None] - pos / safe_pos[:, None]) / tau
    coef[~contrib] = 0.0
    return per, contrib, coef


@njit(cache=True)
def _supcon_terms_nb(sim, labels, tau, neg_mask):
    n = labels.shape[0]
    per = np.zeros(n)
    contrib = np.zeros(n, dtype=np.bool_)
    coef = np.zeros((n, n))
    for i in range(n):
        n_pos = 0
        row_max = -np.inf
        for j in range(n):
            if j == i:
                continue
            is_pos = labels[j] == labels[i]
            if is_pos:
                n_pos += 1
            if is_pos or neg_mask[i, j]:
                v = sim[i, j] / tau
                if v > row_max:
                    row_max = v
        if n_pos == 0:
            continue
        contrib[i] = True
        denom = 0.0
        pos_sum = 0.0
        for j in range(n):
            if j == i:
                continue
            is_pos = labels[j] == labels[i]
            if is_pos or neg_mask[i, j]:
                v = sim[i, j] / tau
                ev = math.exp(v - row_max)
                coef[i, j] = ev
                denom += ev
                if is_pos:
                    pos_sum += v
        per[i] = math.log(denom) + row_max - pos_sum / n_pos
        for j in range(n):
            if j == i:
                continue
            c = coef[i, j] / denom
            if labels[j] == labels[i]:
                c -= 1.0 / n_pos
            coef[i, j] = c / tau
    return per, contrib, coef


if HAS_NUMBA:
    conv1d_forward_numba = _conv1d_forward_nb
    conv1d_backward_numba = _conv1d_backward_nb
    hard_negative_mask_numba = _hard_negative_mask_nb
    supcon_terms_numba = _supcon_terms_nb
else:  # pragma: no cover
    conv1d_forward_numba = conv1d_forward_numpy
    conv1d_backward_numba = conv1d_backward_numpy
    hard_negative_mask_numba = hard_negative_mask_numpy
    supcon_terms_numba = supcon_terms_numpy

# Past this many multiply-adds per tap the matmul formulation (BLAS) beats the
# explicit loops, so the compiled backend hands large convolutions to it.
CONV_LOOP_MAX_WORK = 8192


def _conv1d_forward_auto(x, w, b):
    if x.shape[0] * w.shape[1] * w.shape[2] > CONV_LOOP_MAX_WORK:
        return conv1d_forward_numpy(x, w, b)
    return conv1d_forward_numba(x, w, b)


def _conv1d_backward_auto(g, x, w):
    if x.shape[0] * w.shape[1] * w.shape[2] > CONV_LOOP_MAX_WORK:
        return conv1d_backward_numpy(g, x, w)
    return conv1d_backward_numba(g, x, w)


if USE_NUMBA:
    conv1d_forward = _conv1d_forward_auto
    conv1d_backward = _conv1d_backward_auto
    hard_negative_mask = hard_negative_mask_numba
    supcon_terms = supcon_terms_numba
else:
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy
    hard_negative_mask = hard_negative_mask_numpy
    supcon_terms = supcon_terms_numpy
