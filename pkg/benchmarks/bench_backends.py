"""Timing comparison of the compiled and pure-Python kernel backends.

Micro-benchmarks call both backends' conv and maxpool kernels directly
on shared inputs (checking they agree while at it); the end-to-end row
times one local training epoch in a subprocess per backend, since the
backend is frozen at import.

Usage: python3 benchmarks/bench_backends.py [--repeats N] [--skip-train]
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from psinet.backend import available_backends, get_backend

CONV_CASES = [
    # n, cin, size, cout, kernel, stride, padding
    (32, 1, 16, 20, 3, 1, 1),
    (32, 20, 8, 40, 3, 1, 1),
    (16, 32, 32, 64, 3, 1, 1),
]
POOL_CASES = [
    # n, c, size, kernel, stride
    (32, 20, 16, 2, 2),
    (16, 64, 32, 2, 2),
]

TRAIN_SNIPPET = """
import time
import numpy as np
from psinet.builder import make_tiny10
from psinet.data import synthesize_dataset
from psinet.federation import local_train
from psinet.model import Model

ds = synthesize_dataset(num_classes=10, samples_per_class=32, image_size=16,
                        noise=1.5, seed=7, name="bench")
model = Model.init(make_tiny10(), seed=0)
t0 = time.perf_counter()
local_train(model, ds.images, ds.labels, epochs=1, batch_size=32, lr=0.01,
            momentum=0.9, rng=np.random.default_rng(0))
print(time.perf_counter() - t0)
"""


def median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_kernels(repeats):
    rows = []
    py = get_backend("python")
    nat = get_backend("native")
    rng = np.random.default_rng(0)

    for n, cin, size, cout, k, stride, pad in CONV_CASES:
        x = rng.standard_normal((n, cin, size, size)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        shape = f"{n}x{cin}x{size}x{size} -> {cout}"
        y_py = py.conv2d_forward(x, w, b, stride, pad)
        y_nat = nat.conv2d_forward(x, w, b, stride, pad)
        assert np.allclose(y_py, y_nat, atol=1e-4), "backends disagree on conv forward"
        rows.append((
            "conv2d forward", shape,
            median_ms(lambda: py.conv2d_forward(x, w, b, stride, pad), repeats),
            median_ms(lambda: nat.conv2d_forward(x, w, b, stride, pad), repeats),
        ))
        gy = rng.standard_normal(y_py.shape).astype(np.float32)
        rows.append((
            "conv2d backward", shape,
            median_ms(lambda: py.conv2d_backward(x, w, gy, stride, pad), repeats),
            median_ms(lambda: nat.conv2d_backward(x, w, gy, stride, pad), repeats),
        ))

    for n, c, size, k, stride in POOL_CASES:
        x = rng.standard_normal((n, c, size, size)).astype(np.float32)
        shape = f"{n}x{c}x{size}x{size} k{k}"
        y_py, sw_py = py.maxpool2d_forward(x, k, stride)
        y_nat, sw_nat = nat.maxpool2d_forward(x, k, stride)
        assert np.array_equal(y_py, y_nat), "backends disagree on maxpool forward"
        rows.append((
            "maxpool forward", shape,
            median_ms(lambda: py.maxpool2d_forward(x, k, stride), repeats),
            median_ms(lambda: nat.maxpool2d_forward(x, k, stride), repeats),
        ))
        gy = rng.standard_normal(y_py.shape).astype(np.float32)
        rows.append((
            "maxpool backward", shape,
            median_ms(lambda: py.maxpool2d_backward(gy, sw_py, x.shape, k, stride), repeats),
            median_ms(lambda: nat.maxpool2d_backward(gy, sw_nat, x.shape, k, stride), repeats),
        ))
    return rows


def bench_training():
    times = {}
    for backend in ("python", "native"):
        env = dict(os.environ, PSINET_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET], env=env,
            capture_output=True, text=True, check=True,
        )
        times[backend] = float(out.stdout.strip()) * 1e3
    return [("training epoch", "tiny10, 320 samples", times["python"], times["native"])]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timing repeats per case")
    ap.add_argument("--skip-train", action="store_true",
                    help="skip the end-to-end training row")
    args = ap.parse_args(argv)

    if "native" not in available_backends():
        print("compiled backend not built; nothing to compare", file=sys.stderr)
        return 1

    rows = bench_kernels(args.repeats)
    if not args.skip_train:
        rows += bench_training()

    fmt = "{:<18} {:<22} {:>12} {:>12} {:>9}"
    print(fmt.format("op", "case", "python ms", "native ms", "speedup"))
    print("-" * 77)
    for op, case, t_py, t_nat in rows:
        print(fmt.format(op, case, f"{t_py:.2f}", f"{t_nat:.2f}", f"{t_py / t_nat:.1f}x"))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
