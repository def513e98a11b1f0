#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the convolution/pooling hot loops on the shapes this project actually
trains (the width-0.25 VGG stack at 96x64), plus one full training step.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--csv out.csv]
"""

import argparse
import time

import numpy as np

from kneeattn.kernels import get_backend

# (label, B, H, W, Cin, k, Cout, stride, same)
CONV_SHAPES = [
    ("conv1_1  96x64x1->16", 16, 96, 64, 1, 3, 16, 1, True),
    ("conv2_2  48x32x32", 16, 48, 32, 32, 3, 32, 1, True),
    ("conv3_3  24x16x64", 16, 24, 16, 64, 3, 64, 1, True),
    ("conv4_2  12x8x128", 16, 12, 8, 128, 3, 128, 1, True),
    ("stem     11x11/2", 16, 96, 64, 1, 11, 32, 2, True),
    ("att 1x1  24x16x64->32", 16, 24, 16, 64, 1, 32, 1, True),
]

POOL_SHAPES = [
    ("pool 2x2/2  96x64x16", 16, 96, 64, 16, 2, 2),
    ("pool 3x3/2  48x32x32", 16, 48, 32, 32, 3, 2),
]


def timeit(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(impl, case, repeats):
    _, b, h, w, cin, k, cout, stride, same = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, h, w, cin))
    wt = rng.standard_normal((k, k, cin, cout))
    bias = rng.standard_normal(cout)
    fwd = timeit(lambda: impl.conv2d_forward(x, wt, bias, stride, same), repeats)
    gy = rng.standard_normal(impl.conv2d_forward(x, wt, bias, stride, same).shape)
    bwd = timeit(lambda: impl.conv2d_backward(x, wt, gy, stride, same), repeats)
    return fwd, bwd


def bench_pool(impl, case, repeats):
    _, b, h, w, c, k, stride = case
    rng = np.random.default_rng(1)
    x = rng.standard_normal((b, h, w, c))
    fwd = timeit(lambda: impl.maxpool2d_forward(x, k, stride), repeats)
    _, arg = impl.maxpool2d_forward(x, k, stride)
    gy = rng.standard_normal(arg.shape)
    bwd = timeit(lambda: impl.maxpool2d_backward(gy, arg, x.shape, k, stride), repeats)
    return fwd, bwd


def bench_train_step(repeats):
    """One optimizer step of the desk-scale attention model, per backend."""
    import os
    import subprocess
    import sys

    code = r"""
import time
import numpy as np
from kneeattn.attention import AttentionConfig
from kneeattn.models import ModelSpec, build_model
from kneeattn.training import TrainConfig, Adam, _forward_loss, _onehot
from kneeattn import graph, kernels

spec = ModelSpec(backbone="vgg16", input_hw=(96, 64), width_mult=0.25,
                 branches=("att0", "att1"), fusion="multi-loss", loss_weights=(1.0, 0.8),
                 attention=AttentionConfig(conv_widths=(32, 16)), seed=0)
model = build_model(spec)
rng = np.random.default_rng(0)
x = rng.random((16, 96, 64, 1))
onehot = _onehot(rng.integers(0, 5, 16), 5)
adam = Adam(model.params.values(), TrainConfig())

def step():
    loss, _, _ = _forward_loss(model, x, onehot, (1.0, 0.8))
    graph.zero_grads(model.params.values())
    loss.backward()
    adam.step(1e-4)

step()
best = float("inf")
for _ in range(%d):
    t0 = time.perf_counter()
    step()
    best = min(best, time.perf_counter() - t0)
print(f"{kernels.BACKEND} {best:.4f}")
"""
    results = {}
    for backend in ("python", "cython"):
        env = dict(os.environ, KNEEATTN_BACKEND=backend)
        try:
            out = subprocess.run(
                [sys.executable, "-c", code % repeats], env=env, capture_output=True, text=True, check=True
            )
            name, t = out.stdout.split()
            results[name] = float(t)
        except subprocess.CalledProcessError as exc:
            print(f"  ({backend} step failed: {exc.stderr.strip().splitlines()[-1]})")
    return results


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--csv", help="also write results as CSV")
    args = parser.parse_args()

    py = get_backend("python")
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled extension not available; run pip install -e . first")
        return 1

    rows = []
    print(f"{'kernel':<26} {'dir':<4} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for case in CONV_SHAPES:
        for direction, i in (("fwd", 0), ("bwd", 1)):
            tp = bench_conv(py, case, args.repeats)[i]
            tc = bench_conv(cy, case, args.repeats)[i]
            rows.append((case[0], direction, tp, tc))
            print(f"{case[0]:<26} {direction:<4} {tp*1e3:9.3f} {tc*1e3:10.3f} {tp/tc:7.2f}x")
    for case in POOL_SHAPES:
        for direction, i in (("fwd", 0), ("bwd", 1)):
            tp = bench_pool(py, case, args.repeats)[i]
            tc = bench_pool(cy, case, args.repeats)[i]
            rows.append((case[0], direction, tp, tc))
            print(f"{case[0]:<26} {direction:<4} {tp*1e3:9.3f} {tc*1e3:10.3f} {tp/tc:7.2f}x")

    print("\nfull training step (batch 16, width-0.25 attention model):")
    step = bench_train_step(args.repeats)
    for name in ("python", "cython"):
        if name in step:
            print(f"  {name:<8} {step[name]*1e3:9.1f} ms")
    if "python" in step and "cython" in step:
        print(f"  speedup  {step['python']/step['cython']:.2f}x")

    if args.csv:
        import csv

        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kernel", "direction", "numpy_s", "cython_s"])
            writer.writerows(rows)
        print(f"\nwrote {args.csv}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
