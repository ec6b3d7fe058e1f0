"""Benchmark the compiled convolution kernels against the numpy fallback.

Runs each conv op (forward, input grad, weight grad) on the model's three
extractor shapes at several batch sizes, then times an end-to-end training
step and a batch-1 inference for every backend policy. The per-call "auto"
policy in abnedit.kernels was calibrated from these numbers: the compiled
stencils win 3x3 stride-1 shapes and batch-1 latency, BLAS wins bulk
strided shapes with short inner spans.

Usage: python benchmarks/bench_kernels.py [--reps 30] [--batches 1,8,32]
"""

import argparse
import time

import numpy as np

from abnedit import _numpykernels
from abnedit import autodiff as ad
from abnedit.autodiff import Tensor
from abnedit.model import ModelConfig, build_model, forward

try:
    from abnedit import _convkernels
except ImportError:
    _convkernels = None

SHAPES = [
    ("conv1 s2 1->8 64x64", (1, 64, 64), (8, 1, 3, 3), 2, 1),
    ("conv2 s2 8->16 32x32", (8, 32, 32), (16, 8, 3, 3), 2, 1),
    ("conv3 s1 16->16 16x16", (16, 16, 16), (16, 16, 3, 3), 1, 1),
]


def best_of(fn, args, reps):
    fn(*args)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_ops(reps, batches):
    rng = np.random.default_rng(0)
    print(f"{'shape':<24}{'n':>4}  {'op':<4}{'compiled ms':>12}{'numpy ms':>10}")
    for name, xs, ws, stride, pad in SHAPES:
        for n in batches:
            x = rng.standard_normal((n, *xs)).astype(np.float32)
            w = rng.standard_normal(ws).astype(np.float32)
            ho = (xs[1] + 2 * pad - ws[2]) // stride + 1
            wo = (xs[2] + 2 * pad - ws[3]) // stride + 1
            gy = rng.standard_normal((n, ws[0], ho, wo)).astype(np.float32)
            ops = [
                ("fwd", (x, w, stride, pad), "conv2d_forward"),
                ("gx", (gy, w, xs[1], xs[2], stride, pad), "conv2d_backward_input"),
                ("gw", (gy, x, ws[2], ws[3], stride, pad), "conv2d_backward_weight"),
            ]
            for op, args, attr in ops:
                tn = best_of(getattr(_numpykernels, attr), args, reps)
                if _convkernels is not None:
                    tc = best_of(getattr(_convkernels, attr), args, reps)
                    mark = "*" if tc < tn else " "
                    print(f"{name:<24}{n:>4}  {op:<4}{tc:>11.3f}{mark}{tn:>10.3f}")
                else:
                    print(f"{name:<24}{n:>4}  {op:<4}{'missing':>12}{tn:>10.3f}")


def bench_model(reps):
    import abnedit.kernels as kernels

    model = build_model(ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    xb = rng.random((32, 1, 64, 64)).astype(np.float32)
    yb = rng.integers(0, 4, 32)

    def step():
        r = forward(model, Tensor(xb))
        loss = ad.add(ad.softmax_cross_entropy(r.attention_logits, yb),
                      ad.softmax_cross_entropy(r.perception_logits, yb))
        ad.backward(loss)
        for p in model.parameters():
            p.grad = None

    def infer():
        with ad.no_grad():
            forward(model, Tensor(xb[:1]))

    ts = best_of(lambda: step(), (), max(3, reps // 5))
    ti = best_of(lambda: infer(), (), reps * 3)
    print(f"policy {kernels.get_backend():<7} train step b32 {ts:7.1f} ms"
          f" | b1 inference {ti:6.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=30)
    ap.add_argument("--batches", default="1,8,32",
                    help="comma-separated batch sizes")
    args = ap.parse_args()
    batches = [int(b) for b in args.batches.split(",")]

    if _convkernels is None:
        print("compiled extension not importable; numpy timings only")
    bench_ops(args.reps, batches)
    print()
    bench_model(args.reps)
    print("rerun with ABNEDIT_KERNELS=numpy|cython to time the other policies")


if __name__ == "__main__":
    main()
