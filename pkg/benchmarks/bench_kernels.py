"""Timing comparison of the compiled kernels against the NumPy reference
implementations, plus an end-to-end tokenizer training step on each backend.

Run from the repository root:

    python3 benchmarks/bench_kernels.py            # kernel microbenchmarks
    python3 benchmarks/bench_kernels.py --steps 8  # plus end-to-end steps

Results print as a tab-separated table with the median over ``--repeats``
runs. The extension must be built for the comparison to be meaningful;
without it only the NumPy column appears.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from actok import kernels


def median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def segments(rng, nseg, mean_len, d):
    lengths = rng.integers(mean_len // 2, mean_len * 2, size=nseg)
    offsets = np.zeros(nseg + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return offsets, int(offsets[-1]), d


def benchmark_cases(rng):
    """(name, numpy_callable, compiled_callable) at training-shaped sizes."""
    cases = []

    z = rng.normal(size=(1024, 128))
    book = rng.normal(size=(512, 128))
    cases.append(("nearest_codebook 1024x512x128",
                  lambda: kernels.nearest_codebook_np(z, book),
                  lambda: kernels._EXT.nearest_codebook(z, book)))

    offsets, total, d = segments(rng, nseg=64, mean_len=18, d=128)
    q, k, v, g = (rng.normal(size=(total, d)) for _ in range(4))
    _, w_np = kernels.seg_attention_fwd_np(q, k, v, offsets, 4, True)
    _, w_c = (kernels._EXT.seg_attention_fwd(q, k, v, offsets, 4, True)
              if kernels._EXT else (None, None))
    cases.append((f"attention fwd {total}x{d} h4",
                  lambda: kernels.seg_attention_fwd_np(q, k, v, offsets, 4, True),
                  lambda: kernels._EXT.seg_attention_fwd(q, k, v, offsets, 4, True)))
    cases.append((f"attention bwd {total}x{d} h4",
                  lambda: kernels.seg_attention_bwd_np(
                      g, q, k, v, offsets, 4, True, w_np),
                  lambda: kernels._EXT.seg_attention_bwd(
                      g, q, k, v, offsets, 4, True, w_c)))

    poff, ptotal, pd = segments(rng, nseg=64, mean_len=60, d=64)
    px = rng.normal(size=(ptotal, pd))
    cases.append((f"pooling fwd {ptotal}x{pd} k16",
                  lambda: kernels.seg_pool_fwd_np(px, poff, 16),
                  lambda: kernels._EXT.seg_pool_fwd(px, poff, 16)))

    x = rng.normal(size=(1152, 128))
    gain, bias = rng.normal(size=128), rng.normal(size=128)
    gy = rng.normal(size=x.shape)
    _, cache_np = kernels.layer_norm_fwd_np(x, gain, bias, 1e-5)
    cache_c = (kernels._EXT.layer_norm_fwd(x, gain, bias, 1e-5)[1]
               if kernels._EXT else None)
    cases.append(("layer_norm fwd 1152x128",
                  lambda: kernels.layer_norm_fwd_np(x, gain, bias, 1e-5),
                  lambda: kernels._EXT.layer_norm_fwd(x, gain, bias, 1e-5)))
    cases.append(("layer_norm bwd 1152x128",
                  lambda: kernels.layer_norm_bwd_np(
                      gy, gain, cache_np, True, True, True),
                  lambda: kernels._EXT.layer_norm_bwd(
                      gy, gain, cache_c, True, True, True)))

    n = 256 * 1024
    p = rng.normal(size=n)
    grad = rng.normal(size=n)
    m = np.zeros(n)
    vv = np.zeros(n)
    cases.append((f"adamw_update {n}",
                  lambda: kernels.adamw_update_np(
                      p, grad, m, vv, 1, 1e-3, 0.9, 0.999, 1e-8, 0.01),
                  lambda: kernels._EXT.adamw_update(
                      p, grad, m, vv, 1, 1e-3, 0.9, 0.999, 1e-8, 0.01)))
    return cases


def end_to_end_ms(steps, pure):
    """Median per-step time of tokenizer training in a fresh interpreter."""
    code = f"""
import time
import numpy as np
from actok.data import SyntheticConfig, generate_synthetic
from actok.encoder import Encoder, EncoderConfig
from actok.train import train_vst, vst_train_defaults
from actok import kernels

data_cfg = SyntheticConfig(clips_per_combo=1)
samples = generate_synthetic(data_cfg)[:256]
encoder = Encoder(EncoderConfig(), data_cfg.classes, np.random.default_rng(0))
cfg = vst_train_defaults(iterations=2)
train_vst(samples, encoder, cfg)  # warm caches and allocators
cfg = vst_train_defaults(iterations={steps})
start = time.perf_counter()
train_vst(samples, encoder, cfg)
total = time.perf_counter() - start
print(kernels.BACKEND, total / {steps} * 1e3)
"""
    env = dict(os.environ)
    if pure:
        env["ACTOK_PURE"] = "1"
    else:
        env.pop("ACTOK_PURE", None)
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    backend, ms = out.stdout.split()
    return backend, float(ms)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="runs per case; the median is reported")
    parser.add_argument("--steps", type=int, default=0,
                        help="also time this many end-to-end tokenizer "
                             "training steps per backend")
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"backend in this process: {kernels.BACKEND}")
    print("case\tnumpy_ms\tcompiled_ms\tspeedup")
    for name, np_fn, ext_fn in benchmark_cases(rng):
        np_ms = median_ms(np_fn, args.repeats)
        if kernels._EXT is None:
            print(f"{name}\t{np_ms:.3f}\t-\t-")
            continue
        ext_ms = median_ms(ext_fn, args.repeats)
        print(f"{name}\t{np_ms:.3f}\t{ext_ms:.3f}\t{np_ms / ext_ms:.2f}x")

    if args.steps > 0:
        print()
        print("end-to-end tokenizer training (fresh interpreter per backend)")
        print("backend\tms_per_step")
        backend, ms = end_to_end_ms(args.steps, pure=True)
        print(f"{backend}\t{ms:.1f}")
        if kernels._EXT is not None:
            backend, ms = end_to_end_ms(args.steps, pure=False)
            print(f"{backend}\t{ms:.1f}")


if __name__ == "__main__":
    main()
