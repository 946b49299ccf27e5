"""Compiled-kernel backend against the NumPy reference implementations.

Every dispatching kernel must produce the same integer outputs exactly and
the same float outputs to accumulation-order tolerance, so a build without
the extension (``ACTOK_PURE=1`` or no compiler) changes nothing but speed.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from actok import kernels

needs_ext = pytest.mark.skipif(kernels._EXT is None,
                               reason="compiled extension not built")


def random_segments(rng, nseg=4, d=12, lo=1, hi=9):
    lengths = rng.integers(lo, hi, size=nseg)
    offsets = np.zeros(nseg + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    total = int(offsets[-1])
    return offsets, total, d


# ---------------------------------------------------------------------------
# dispatch plumbing


def test_backend_name_matches_extension_presence():
    assert kernels.BACKEND in ("compiled", "numpy")
    assert (kernels.BACKEND == "compiled") == (kernels._EXT is not None)


def test_pure_env_var_forces_numpy_backend():
    out = subprocess.run(
        [sys.executable, "-c",
         "from actok import kernels; print(kernels.BACKEND)"],
        env={**os.environ, "ACTOK_PURE": "1"},
        capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


# ---------------------------------------------------------------------------
# nearest-codebook assignment


@needs_ext
def test_nearest_codebook_matches_reference_exactly():
    rng = np.random.default_rng(0)
    for n, v, d in [(1, 2, 3), (17, 8, 5), (64, 33, 16), (0, 8, 4)]:
        z = rng.normal(size=(n, d))
        book = rng.normal(size=(v, d))
        got = kernels._EXT.nearest_codebook(z, book)
        want = kernels.nearest_codebook_np(z, book)
        assert got.dtype == want.dtype == np.int64
        np.testing.assert_array_equal(got, want)


@needs_ext
def test_nearest_codebook_duplicate_rows_take_lowest_index():
    rng = np.random.default_rng(1)
    book = rng.normal(size=(6, 4))
    book[4] = book[1]  # exact duplicate later in the table
    z = np.repeat(book[1][None, :], 5, axis=0)
    got = kernels._EXT.nearest_codebook(z, book)
    np.testing.assert_array_equal(got, np.ones(5, dtype=np.int64))
    np.testing.assert_array_equal(got, kernels.nearest_codebook_np(z, book))


# ---------------------------------------------------------------------------
# segment attention


@needs_ext
@pytest.mark.parametrize("heads", [1, 2, 4])
@pytest.mark.parametrize("causal", [False, True])
def test_attention_forward_backward_match_reference(heads, causal):
    rng = np.random.default_rng(2 + heads)
    offsets, total, d = random_segments(rng, nseg=5, d=12)
    q, k, v, g = (rng.normal(size=(total, d)) for _ in range(4))

    out_c, cache = kernels._EXT.seg_attention_fwd(q, k, v, offsets, heads, causal)
    out_n, weights = kernels.seg_attention_fwd_np(q, k, v, offsets, heads, causal)
    np.testing.assert_allclose(out_c, out_n, rtol=0, atol=1e-13)

    gq_c, gk_c, gv_c = kernels._EXT.seg_attention_bwd(
        g, q, k, v, offsets, heads, causal, cache)
    gq_n, gk_n, gv_n = kernels.seg_attention_bwd_np(
        g, q, k, v, offsets, heads, causal, weights)
    np.testing.assert_allclose(gq_c, gq_n, rtol=0, atol=1e-13)
    np.testing.assert_allclose(gk_c, gk_n, rtol=0, atol=1e-13)
    np.testing.assert_allclose(gv_c, gv_n, rtol=0, atol=1e-13)


@needs_ext
def test_attention_single_row_segments():
    rng = np.random.default_rng(9)
    offsets = np.array([0, 1, 2], dtype=np.int64)
    q, k, v = (rng.normal(size=(2, 8)) for _ in range(3))
    out_c, _ = kernels._EXT.seg_attention_fwd(q, k, v, offsets, 2, True)
    out_n, _ = kernels.seg_attention_fwd_np(q, k, v, offsets, 2, True)
    np.testing.assert_allclose(out_c, out_n, rtol=0, atol=1e-15)
    # one-row softmax is a delta: the output is v itself
    np.testing.assert_allclose(out_c, v, rtol=0, atol=1e-15)


@needs_ext
def test_causal_masking_ignores_future_rows_bitwise():
    rng = np.random.default_rng(3)
    offsets = np.array([0, 7], dtype=np.int64)
    q, k, v = (rng.normal(size=(7, 8)) for _ in range(3))
    out_a, _ = kernels._EXT.seg_attention_fwd(q, k, v, offsets, 2, True)
    k2, v2 = k.copy(), v.copy()
    k2[5:] += 100.0
    v2[5:] -= 7.0
    out_b, _ = kernels._EXT.seg_attention_fwd(q, k2, v2, offsets, 2, True)
    assert np.array_equal(out_a[:5], out_b[:5])


# ---------------------------------------------------------------------------
# segment pooling


@needs_ext
def test_pooling_matches_reference_down_and_up():
    rng = np.random.default_rng(4)
    for lengths, k in [((10, 3, 7), 4), ((2, 1, 3), 4), ((16, 16), 4),
                       ((5,), 5), ((1,), 3)]:
        offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        x = rng.normal(size=(int(offsets[-1]), 6))
        out_c, spans_c = kernels._EXT.seg_pool_fwd(x, offsets, k)
        out_n, spans_n = kernels.seg_pool_fwd_np(x, offsets, k)
        np.testing.assert_array_equal(spans_c, spans_n)
        np.testing.assert_allclose(out_c, out_n, rtol=0, atol=1e-14)

        g = rng.normal(size=out_c.shape)
        gx_c = kernels._EXT.seg_pool_bwd(g, spans_c, x.shape[0])
        gx_n = kernels.seg_pool_bwd_np(g, spans_n, x.shape[0])
        np.testing.assert_allclose(gx_c, gx_n, rtol=0, atol=1e-14)


@needs_ext
def test_pooling_rejects_empty_segment_like_reference():
    x = np.zeros((3, 4))
    offsets = np.array([0, 3, 3], dtype=np.int64)
    with pytest.raises(ValueError, match="positive extents"):
        kernels._EXT.seg_pool_fwd(x, offsets, 2)
    with pytest.raises(ValueError, match="positive extents"):
        kernels.seg_pool_fwd_np(x, offsets, 2)


# ---------------------------------------------------------------------------
# layer normalization


@needs_ext
@pytest.mark.parametrize("need", [(True, True, True), (True, False, False),
                                  (False, True, True), (False, False, False)])
def test_layer_norm_matches_reference(need):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(9, 14))
    gain = rng.normal(size=14)
    bias = rng.normal(size=14)
    g = rng.normal(size=x.shape)
    eps = 1e-5

    y_c, cache_c = kernels._EXT.layer_norm_fwd(x, gain, bias, eps)
    y_n, cache_n = kernels.layer_norm_fwd_np(x, gain, bias, eps)
    np.testing.assert_allclose(y_c, y_n, rtol=0, atol=1e-13)

    got = kernels._EXT.layer_norm_bwd(g, gain, cache_c, *need)
    want = kernels.layer_norm_bwd_np(g, gain, cache_n, *need)
    for a, b, wanted in zip(got, want, need):
        if not wanted:
            assert a is None and b is None
        else:
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


# ---------------------------------------------------------------------------
# fused optimizer update


@needs_ext
@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_update_is_bitwise_equal(wd):
    rng = np.random.default_rng(6)
    shape = (7, 5)
    p0 = rng.normal(size=shape)
    g = rng.normal(size=shape)
    m0 = rng.normal(size=shape) * 0.1
    v0 = np.abs(rng.normal(size=shape)) * 0.1

    pc, mc, vc = p0.copy(), m0.copy(), v0.copy()
    kernels._EXT.adamw_update(pc.reshape(-1), g.reshape(-1),
                              mc.reshape(-1), vc.reshape(-1),
                              3, 1e-3, 0.9, 0.999, 1e-8, wd)
    pn, mn, vn = p0.copy(), m0.copy(), v0.copy()
    kernels.adamw_update_np(pn.reshape(-1), g.reshape(-1),
                            mn.reshape(-1), vn.reshape(-1),
                            3, 1e-3, 0.9, 0.999, 1e-8, wd)
    assert np.array_equal(pc, pn)
    assert np.array_equal(mc, mn)
    assert np.array_equal(vc, vn)
