#!/usr/bin/env python3
"""Benchmark the numba and numpy convolution backends.

Times forward, input-grad and weight-grad kernels on every conv shape a
ResNet-8 hits during batch-64 pretraining at 32x32, then one full
training step through the autodiff engine under each backend.

Run: python3 benchmarks/bench_kernels.py [--batch 64] [--repeats 10]
"""

import argparse
import time

import numpy as np

from patchrot import kernels, models, pretext
from patchrot.data import make_synthetic_shapes
from patchrot.training import TrainConfig, _train_step

# (C, H, W, F, stride, ksize) per conv layer, batch prepended at runtime
RESNET8_CONVS = [
    (3, 32, 32, 16, 1, 3),
    (16, 32, 32, 16, 1, 3),
    (16, 32, 32, 16, 1, 3),
    (16, 16, 16, 32, 2, 3),
    (32, 16, 16, 32, 1, 3),
    (16, 16, 16, 32, 2, 1),   # zero-pad identity skip
    (32, 8, 8, 64, 2, 3),
    (64, 8, 8, 64, 1, 3),
    (32, 8, 8, 64, 2, 1),     # zero-pad identity skip
]


def time_call(fn, repeats):
    fn()  # warm (numba compiles here)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(batch, repeats):
    # one pass per backend (numpy's BLAS threads spin-wait briefly after a
    # GEMM; interleaving the backends would tax the numba timings)
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    rng = np.random.default_rng(0)
    totals = {b: dict(fwd=0.0, dx=0.0, dw=0.0) for b in backends}
    rows = {b: [] for b in backends}
    for b in backends:
        time.sleep(0.2)
        for (c, h, w, f, stride, k) in RESNET8_CONVS:
            pad = (k - 1) // 2
            x = rng.standard_normal((batch, c, h, w), dtype=np.float32)
            wgt = rng.standard_normal((f, c, k, k), dtype=np.float32)
            y, ctx = kernels.conv2d_forward(x, wgt, stride, pad, backend=b)
            dy = rng.standard_normal(y.shape, dtype=np.float32)
            t_fwd = time_call(lambda: kernels.conv2d_forward(x, wgt, stride, pad, backend=b),
                              repeats)
            t_dx = time_call(lambda: kernels.conv2d_backward(ctx, dy, need_dw=False), repeats)
            t_dw = time_call(lambda: kernels.conv2d_backward(ctx, dy, need_dx=False), repeats)
            totals[b]["fwd"] += t_fwd
            totals[b]["dx"] += t_dx
            totals[b]["dw"] += t_dw
            rows[b].append(f"{t_fwd * 1e3:>9.2f} {t_dx * 1e3:>9.2f} {t_dw * 1e3:>9.2f}")

    header = f"{'shape':>24}" + "".join(f"{b + ' ' + p:>10}" for b in backends
                                        for p in ("fwd", "dx", "dw"))
    print(header)
    for i, (c, h, w, f, stride, k) in enumerate(RESNET8_CONVS):
        label = f"C{c:<3d}{h:>3d}x{w:<3d}F{f:<3d}s{stride} k{k}".rjust(24)
        print(label + " " + "  ".join(rows[b][i] for b in backends))
    for b in backends:
        t = totals[b]
        print(f"{b:>7} totals: fwd {t['fwd']*1e3:7.1f} ms   dx {t['dx']*1e3:7.1f} ms   "
              f"dw {t['dw']*1e3:7.1f} ms   all {(t['fwd']+t['dx']+t['dw'])*1e3:7.1f} ms")
    return backends, totals


def bench_training_step(batch, repeats):
    print("\nfull ResNet-8 PatchRotNet training step (forward+backward+update):")
    ds = make_synthetic_shapes(batch // 8 or 1, 32, seed=0)
    cfg = TrainConfig.ssl(epochs=1, batch_size=batch, seed=0)
    results = {}
    for b in (["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])):
        kernels.set_backend(b)
        model = models.SslModel(models.EncoderSpec("resnet8"), models.PATCHROT8, seed=0)
        params = [t for _, t in model.named_params()]
        batch_obj = next(pretext.build_epoch(ds.images, pretext.PATCH_ROTNET,
                                             pretext.PretextConfig(rng_seed=0), batch))

        def step():
            _train_step(model, batch_obj, cfg, cfg.lr, params, {}, "bench")

        results[b] = time_call(step, repeats)
        print(f"  {b:>6}: {results[b] * 1e3:8.1f} ms/step")
    if len(results) == 2:
        ratio = results["numpy"] / results["numba"]
        faster = "numba" if ratio > 1 else "numpy"
        print(f"  speedup: {max(ratio, 1 / ratio):.2f}x in favour of {faster}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()
    print(f"batch={args.batch} repeats={args.repeats} "
          f"(numba {'available' if kernels.HAS_NUMBA else 'missing'})\n")
    bench_kernels(args.batch, args.repeats)
    bench_training_step(args.batch, args.repeats)


if __name__ == "__main__":
    main()
