# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend: fused single-threaded C loops, with BLAS for the
matrix products.

Each routine mirrors the NumPy reference implementation in ``actok.kernels``
(the test suite cross-checks the two backends). Inputs are C-contiguous
float64 matrices. BLAS calls rely on the transpose identity — a row-major
[r, c] matrix is the column-major [c, r] matrix of the same buffer — so the
per-head column slabs of the stacked activations are addressed with leading
dimensions instead of copies.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, pow, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                       double* a, int lda, double* b, int ldb,
                       double beta, double* c, int ldc) noexcept nogil:
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


# ---------------------------------------------------------------------------
# nearest-codebook assignment
# ---------------------------------------------------------------------------

def nearest_codebook(double[:, ::1] z, double[:, ::1] codebook):
    """Index of the squared-Euclidean-nearest codebook row for each z row.

    Same expansion as the NumPy path (dropping the constant per-row ||z||^2
    term); ties resolve to the lowest index via strict-less comparison.
    """
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    cdef Py_ssize_t v = codebook.shape[0]
    ids_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] ids = ids_arr
    if n == 0:
        return ids_arr
    cross_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] cross = cross_arr
    cnorm_arr = np.empty(v, dtype=np.float64)
    cdef double[::1] cnorm = cnorm_arr
    cdef Py_ssize_t i, j, t, arg
    cdef double acc, best, val
    for j in range(v):
        acc = 0.0
        for t in range(d):
            acc += codebook[j, t] * codebook[j, t]
        cnorm[j] = acc
    # cross = z @ codebook.T, row-major [n, v]
    _gemm(b'T', b'N', <int>v, <int>n, <int>d, 1.0,
          &codebook[0, 0], <int>d, &z[0, 0], <int>d, 0.0, &cross[0, 0], <int>v)
    for i in range(n):
        arg = 0
        best = cnorm[0] - 2.0 * cross[i, 0]
        for j in range(1, v):
            val = cnorm[j] - 2.0 * cross[i, j]
            if val < best:
                best = val
                arg = j
        ids[i] = arg
    return ids_arr


# ---------------------------------------------------------------------------
# segment attention
# ---------------------------------------------------------------------------

def seg_attention_fwd(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v,
                      offsets, Py_ssize_t heads, bint causal):
    """Multi-head scaled-dot attention within each segment.

    The cache is a flat buffer holding every head's post-softmax weight
    matrix (segment-major, head-major, rows contiguous); masked entries are
    stored as exact zeros so the backward pass needs no mask logic.
    """
    off_arr = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef i64[::1] off = off_arr
    cdef Py_ssize_t nseg = off.shape[0] - 1
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t dh = d // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, m, total = 0
    for s in range(nseg):
        m = off[s + 1] - off[s]
        total += heads * m * m
    cache_arr = np.empty(total, dtype=np.float64)
    cdef double[::1] cache = cache_arr
    cdef Py_ssize_t a, h, i, j, lim, cur = 0
    cdef double mx, acc
    cdef double* w
    for s in range(nseg):
        a = off[s]
        m = off[s + 1] - off[s]
        if m == 0:
            continue
        for h in range(heads):
            w = &cache[cur]
            # scores = q_h @ k_h.T * scale, row-major [m, m]
            _gemm(b'T', b'N', <int>m, <int>m, <int>dh, scale,
                  &k[a, h * dh], <int>d, &q[a, h * dh], <int>d, 0.0, w, <int>m)
            for i in range(m):
                lim = i + 1 if causal else m
                mx = w[i * m]
                for j in range(1, lim):
                    if w[i * m + j] > mx:
                        mx = w[i * m + j]
                acc = 0.0
                for j in range(lim):
                    w[i * m + j] = exp(w[i * m + j] - mx)
                    acc += w[i * m + j]
                for j in range(lim):
                    w[i * m + j] /= acc
                for j in range(lim, m):
                    w[i * m + j] = 0.0
            # out_h = weights @ v_h
            _gemm(b'N', b'N', <int>dh, <int>m, <int>m, 1.0,
                  &v[a, h * dh], <int>d, w, <int>m, 0.0, &out[a, h * dh], <int>d)
            cur += m * m
    return out_arr, cache_arr


def seg_attention_bwd(double[:, ::1] g, double[:, ::1] q, double[:, ::1] k,
                      double[:, ::1] v, offsets, Py_ssize_t heads, bint causal,
                      double[::1] cache):
    off_arr = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef i64[::1] off = off_arr
    cdef Py_ssize_t nseg = off.shape[0] - 1
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t dh = d // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    gq_arr = np.empty((n, d), dtype=np.float64)
    gk_arr = np.empty((n, d), dtype=np.float64)
    gv_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gk = gk_arr
    cdef double[:, ::1] gv = gv_arr
    cdef Py_ssize_t s, m, max_m = 0
    for s in range(nseg):
        m = off[s + 1] - off[s]
        if m > max_m:
            max_m = m
    ds_arr = np.empty(max_m * max_m, dtype=np.float64)
    cdef double[::1] ds_buf = ds_arr
    cdef Py_ssize_t a, h, i, j, cur = 0
    cdef double acc
    cdef double* w
    cdef double* ds
    for s in range(nseg):
        a = off[s]
        m = off[s + 1] - off[s]
        if m == 0:
            continue
        for h in range(heads):
            w = &cache[cur]
            ds = &ds_buf[0]
            # dv_h = weights.T @ g_h
            _gemm(b'N', b'T', <int>dh, <int>m, <int>m, 1.0,
                  &g[a, h * dh], <int>d, w, <int>m, 0.0, &gv[a, h * dh], <int>d)
            # dw = g_h @ v_h.T, row-major [m, m]
            _gemm(b'T', b'N', <int>m, <int>m, <int>dh, 1.0,
                  &v[a, h * dh], <int>d, &g[a, h * dh], <int>d, 0.0, ds, <int>m)
            # softmax backward: ds = w * (dw - rowsum(dw * w));
            # masked columns hold w == 0 and contribute nothing.
            for i in range(m):
                acc = 0.0
                for j in range(m):
                    acc += ds[i * m + j] * w[i * m + j]
                for j in range(m):
                    ds[i * m + j] = w[i * m + j] * (ds[i * m + j] - acc)
            # dq_h = ds @ k_h * scale; dk_h = ds.T @ q_h * scale
            _gemm(b'N', b'N', <int>dh, <int>m, <int>m, scale,
                  &k[a, h * dh], <int>d, ds, <int>m, 0.0, &gq[a, h * dh], <int>d)
            _gemm(b'N', b'T', <int>dh, <int>m, <int>m, scale,
                  &q[a, h * dh], <int>d, ds, <int>m, 0.0, &gk[a, h * dh], <int>d)
            cur += m * m
    return gq_arr, gk_arr, gv_arr


# ---------------------------------------------------------------------------
# segment mean pooling
# ---------------------------------------------------------------------------

def seg_pool_fwd(double[:, ::1] x, offsets, Py_ssize_t k):
    off_arr = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef i64[::1] off = off_arr
    cdef Py_ssize_t nseg = off.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.empty((nseg * k, d), dtype=np.float64)
    spans_arr = np.empty((nseg * k, 2), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef i64[:, ::1] spans = spans_arr
    cdef Py_ssize_t s, m, a, j, c, r, base, rem, pos, size, lo, hi, row = 0
    cdef double acc
    for s in range(nseg):
        a = off[s]
        m = off[s + 1] - off[s]
        if m <= 0 or k <= 0:
            raise ValueError(f"pooling needs positive extents, got m={m} k={k}")
        if m >= k:
            base = m // k
            rem = m % k
            pos = 0
            for j in range(k):
                size = base + (1 if j < rem else 0)
                lo = a + pos
                hi = a + pos + size
                pos += size
                spans[row, 0] = lo
                spans[row, 1] = hi
                for c in range(d):
                    acc = 0.0
                    for r in range(lo, hi):
                        acc += x[r, c]
                    out[row, c] = acc / size
                row += 1
        else:
            for j in range(k):
                lo = (j * m + m // 2) // k
                if lo > m - 1:
                    lo = m - 1
                lo += a
                spans[row, 0] = lo
                spans[row, 1] = lo + 1
                for c in range(d):
                    out[row, c] = x[lo, c]
                row += 1
    return out_arr, spans_arr


def seg_pool_bwd(double[:, ::1] g, spans, Py_ssize_t n_rows):
    spans_arr = np.ascontiguousarray(spans, dtype=np.int64)
    cdef i64[:, ::1] sp = spans_arr
    cdef Py_ssize_t nrow = sp.shape[0]
    cdef Py_ssize_t d = g.shape[1]
    gx_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    shard_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] shard = shard_arr
    cdef Py_ssize_t row, r, c, lo, hi
    cdef double inv
    for row in range(nrow):
        lo = sp[row, 0]
        hi = sp[row, 1]
        inv = 1.0 / (hi - lo)
        for c in range(d):
            shard[c] = g[row, c] * inv
        for r in range(lo, hi):
            for c in range(d):
                gx[r, c] += shard[c]
    return gx_arr


# ---------------------------------------------------------------------------
# row-wise layer normalization
# ---------------------------------------------------------------------------

def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias,
                   double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, diff, s, xh
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            var += diff * diff
        var /= d
        s = 1.0 / sqrt(var + eps)
        inv[i] = s
        for j in range(d):
            xh = (x[i, j] - mu) * s
            xhat[i, j] = xh
            y[i, j] = xh * gain[j] + bias[j]
    return y_arr, (xhat_arr, inv_arr)


def layer_norm_bwd(double[:, ::1] g, double[::1] gain, cache,
                   bint need_x, bint need_gain, bint need_bias):
    xhat_arr, inv_arr = cache
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t d = g.shape[1]
    gx_arr = np.empty((n, d), dtype=np.float64) if need_x else None
    gg_arr = np.zeros(d, dtype=np.float64) if need_gain else None
    gb_arr = np.zeros(d, dtype=np.float64) if need_bias else None
    cdef double[:, ::1] gx = gx_arr if need_x else None
    cdef double[::1] gg = gg_arr if need_gain else None
    cdef double[::1] gb = gb_arr if need_bias else None
    cdef Py_ssize_t i, j
    cdef double s1, s2, dxh
    for i in range(n):
        if need_x:
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                dxh = g[i, j] * gain[j]
                s1 += dxh
                s2 += dxh * xhat[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dxh = g[i, j] * gain[j]
                gx[i, j] = inv[i] * (dxh - s1 - xhat[i, j] * s2)
        if need_gain:
            for j in range(d):
                gg[j] += g[i, j] * xhat[i, j]
        if need_bias:
            for j in range(d):
                gb[j] += g[i, j]
    return gx_arr, gg_arr, gb_arr


# ---------------------------------------------------------------------------
# fused AdamW update
# ---------------------------------------------------------------------------

def adamw_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                 Py_ssize_t t, double lr, double beta1, double beta2,
                 double eps, double wd):
    """One decoupled-weight-decay Adam step, in place on p, m, v (flattened
    views of the parameter buffers)."""
    cdef double bc1 = 1.0 - pow(beta1, <double>t)
    cdef double bc2 = 1.0 - pow(beta2, <double>t)
    cdef Py_ssize_t i
    cdef double mi, vi
    for i in range(p.shape[0]):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        p[i] -= lr * ((mi / bc1) / (sqrt(vi / bc2) + eps))
        if wd != 0.0:
            p[i] -= lr * wd * p[i]
