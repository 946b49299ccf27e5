"""Hot numeric kernels with two interchangeable backends.

The compiled extension (``actok._fastkern``) is used when it imported
cleanly; otherwise the NumPy implementations below take over. Setting the
environment variable ``ACTOK_PURE=1`` forces the NumPy path even when the
extension is present. Both backends implement the same contracts and are
cross-checked in the test suite.

Kernels operate on stacked row matrices: a batch of variable-length
sequences is concatenated along axis 0 and described by an ``offsets``
vector of length ``num_segments + 1`` (prefix offsets into the rows).
"""

from __future__ import annotations

import math
import os

import numpy as np


def _load_ext():
    if os.environ.get("ACTOK_PURE"):
        return None
    try:
        from . import _fastkern  # noqa: PLC0415
    except ImportError:
        return None
    return _fastkern


_EXT = _load_ext()
BACKEND = "compiled" if _EXT is not None else "numpy"


def single_segment(n: int) -> np.ndarray:
    """Offsets vector describing one contiguous segment of n rows."""
    return np.array([0, n], dtype=np.int64)


# ---------------------------------------------------------------------------
# nearest-codebook assignment
# ---------------------------------------------------------------------------

def nearest_codebook_np(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the squared-Euclidean-nearest codebook row for each z row.

    Ties resolve to the lowest index (argmin keeps the first minimum).
    """
    # ||z - e||^2 = ||z||^2 - 2 z.e + ||e||^2; the ||z||^2 term is constant
    # per row and cannot change the argmin, so it is dropped.
    cross = z @ codebook.T
    d2 = (codebook * codebook).sum(axis=1)[None, :] - 2.0 * cross
    return d2.argmin(axis=1).astype(np.int64)


def nearest_codebook(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    if z.ndim != 2 or codebook.ndim != 2 or z.shape[1] != codebook.shape[1]:
        raise ValueError(
            f"bad quantizer operands: rows {z.shape} vs codebook {codebook.shape}"
        )
    if _EXT is not None:
        return _EXT.nearest_codebook(
            np.ascontiguousarray(z), np.ascontiguousarray(codebook)
        )
    return nearest_codebook_np(z, codebook)


# ---------------------------------------------------------------------------
# segment attention
# ---------------------------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, heads, d // heads).transpose(1, 0, 2)


def seg_attention_fwd_np(q, k, v, offsets, heads, causal):
    d = q.shape[1]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    out = np.empty_like(q)
    weights = []
    for a, b in zip(offsets[:-1], offsets[1:]):
        qh = _split_heads(q[a:b], heads)
        kh = _split_heads(k[a:b], heads)
        vh = _split_heads(v[a:b], heads)
        s = (qh @ kh.transpose(0, 2, 1)) * scale
        if causal:
            m = b - a
            s = s + np.triu(np.full((m, m), -np.inf), k=1)
        s -= s.max(axis=2, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=2, keepdims=True)
        out[a:b] = (s @ vh).transpose(1, 0, 2).reshape(b - a, d)
        weights.append(s)
    return out, weights


def seg_attention_bwd_np(g, q, k, v, offsets, heads, causal, weights):
    d = q.shape[1]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    gq = np.empty_like(q)
    gk = np.empty_like(k)
    gv = np.empty_like(v)
    for i, (a, b) in enumerate(zip(offsets[:-1], offsets[1:])):
        m = b - a
        w = weights[i]
        qh = _split_heads(q[a:b], heads)
        kh = _split_heads(k[a:b], heads)
        vh = _split_heads(v[a:b], heads)
        gh = _split_heads(g[a:b], heads)
        dv = w.transpose(0, 2, 1) @ gh
        dw = gh @ vh.transpose(0, 2, 1)
        ds = w * (dw - (dw * w).sum(axis=2, keepdims=True))
        dq = (ds @ kh) * scale
        dk = (ds.transpose(0, 2, 1) @ qh) * scale
        gq[a:b] = dq.transpose(1, 0, 2).reshape(m, d)
        gk[a:b] = dk.transpose(1, 0, 2).reshape(m, d)
        gv[a:b] = dv.transpose(1, 0, 2).reshape(m, d)
    return gq, gk, gv


def seg_attention_fwd(q, k, v, offsets, heads, causal):
    """Multi-head scaled-dot attention within each segment.

    Returns (out, cache); the cache is backend-specific and must be handed
    back to seg_attention_bwd unchanged.
    """
    if _EXT is not None:
        return _EXT.seg_attention_fwd(
            np.ascontiguousarray(q), np.ascontiguousarray(k),
            np.ascontiguousarray(v), offsets, heads, causal,
        )
    return seg_attention_fwd_np(q, k, v, offsets, heads, causal)


def seg_attention_bwd(g, q, k, v, offsets, heads, causal, cache):
    if _EXT is not None:
        return _EXT.seg_attention_bwd(
            np.ascontiguousarray(g), np.ascontiguousarray(q),
            np.ascontiguousarray(k), np.ascontiguousarray(v),
            offsets, heads, causal, cache,
        )
    return seg_attention_bwd_np(g, q, k, v, offsets, heads, causal, cache)


# ---------------------------------------------------------------------------
# segment mean pooling
# ---------------------------------------------------------------------------

def pool_spans(m: int, k: int) -> np.ndarray:
    """Row spans [start, end) pooling an m-row segment into k output rows.

    m >= k: contiguous bins whose sizes differ by at most one, longer bins
    first. m < k: nearest-index upsampling (each output row reads one
    source row, rows may repeat).
    """
    if m <= 0 or k <= 0:
        raise ValueError(f"pooling needs positive extents, got m={m} k={k}")
    spans = np.empty((k, 2), dtype=np.int64)
    if m >= k:
        base, rem = divmod(m, k)
        pos = 0
        for j in range(k):
            size = base + (1 if j < rem else 0)
            spans[j] = (pos, pos + size)
            pos += size
    else:
        for j in range(k):
            src = min(m - 1, (j * m + m // 2) // k)
            spans[j] = (src, src + 1)
    return spans


def seg_pool_fwd_np(x, offsets, k):
    nseg = len(offsets) - 1
    d = x.shape[1]
    out = np.empty((nseg * k, d))
    spans = np.empty((nseg * k, 2), dtype=np.int64)
    row = 0
    for a, b in zip(offsets[:-1], offsets[1:]):
        for s, e in pool_spans(b - a, k):
            out[row] = x[a + s:a + e].mean(axis=0)
            spans[row] = (a + s, a + e)
            row += 1
    return out, spans


def seg_pool_bwd_np(g, spans, n_rows):
    gx = np.zeros((n_rows, g.shape[1]))
    for row, (s, e) in enumerate(spans):
        gx[s:e] += g[row] / (e - s)
    return gx


def seg_pool_fwd(x, offsets, k):
    if _EXT is not None:
        return _EXT.seg_pool_fwd(np.ascontiguousarray(x), offsets, int(k))
    return seg_pool_fwd_np(x, offsets, k)


def seg_pool_bwd(g, spans, n_rows):
    if _EXT is not None:
        return _EXT.seg_pool_bwd(np.ascontiguousarray(g), spans, int(n_rows))
    return seg_pool_bwd_np(g, spans, n_rows)


# ---------------------------------------------------------------------------
# row-wise layer normalization
# ---------------------------------------------------------------------------

def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv)


def layer_norm_bwd_np(g, gain, cache, need_x, need_gain, need_bias):
    xhat, inv = cache
    if need_x:
        dxhat = g * gain
        gx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
    else:
        gx = None
    gg = (g * xhat).sum(axis=0) if need_gain else None
    gb = g.sum(axis=0) if need_bias else None
    return gx, gg, gb


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize each row to zero mean / unit variance, then apply the
    learned per-column gain and bias. Returns (y, cache); the cache is
    backend-specific and must be handed back to layer_norm_bwd unchanged.
    """
    if _EXT is not None:
        return _EXT.layer_norm_fwd(
            np.ascontiguousarray(x), np.ascontiguousarray(gain),
            np.ascontiguousarray(bias), float(eps),
        )
    return layer_norm_fwd_np(x, gain, bias, eps)


def layer_norm_bwd(g, gain, cache, need_x, need_gain, need_bias):
    """Gradients (gx, ggain, gbias); entries whose need flag is false come
    back as None and are skipped by the tape."""
    if _EXT is not None:
        return _EXT.layer_norm_bwd(
            np.ascontiguousarray(g), np.ascontiguousarray(gain), cache,
            bool(need_x), bool(need_gain), bool(need_bias),
        )
    return layer_norm_bwd_np(g, gain, cache, need_x, need_gain, need_bias)


# ---------------------------------------------------------------------------
# fused AdamW update
# ---------------------------------------------------------------------------

def adamw_update_np(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps))
    if wd != 0.0:
        p -= lr * wd * p


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step, in place on p, m, v."""
    if _EXT is not None and p.ndim <= 2 and p.flags.c_contiguous:
        _EXT.adamw_update(
            p.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
            m.reshape(-1), v.reshape(-1),
            int(t), float(lr), float(beta1), float(beta2), float(eps), float(wd),
        )
        return
    adamw_update_np(p, g, m, v, t, lr, beta1, beta2, eps, wd)
