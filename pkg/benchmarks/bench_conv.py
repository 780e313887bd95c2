"""Compare the pure-numpy and compiled conv kernels.

Times forward and both backward passes over shapes the attack loop actually
hits (small spatial dims, growing batch).  Run from the repo root:

    python3 benchmarks/bench_conv.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from latentlab.kernels import available_backends, backend, set_backend
from latentlab.kernels import (conv2d_backward_input, conv2d_backward_weight,
                               conv2d_forward)

SHAPES = [
    # batch, cin, cout, h, w, stride
    (16, 1, 8, 12, 12, 1),
    (64, 8, 8, 12, 12, 1),
    (64, 8, 16, 12, 12, 2),
    (256, 16, 16, 6, 6, 1),
    (256, 1, 8, 28, 28, 1),
]


def time_case(b, cin, cout, h, w, stride, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, cin, h, w), dtype=np.float32)
    wgt = rng.standard_normal((cout, cin, 3, 3), dtype=np.float32)
    out = conv2d_forward(x, wgt, stride, 1)
    grad = rng.standard_normal(out.shape, dtype=np.float32)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        conv2d_forward(x, wgt, stride, 1)
        conv2d_backward_input(grad, wgt, stride, 1, h, w)
        conv2d_backward_weight(grad, x, 3, 3, stride, 1)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; timing pure only")
    original = backend()
    results = {}
    for name in backends:
        set_backend(name)
        results[name] = [time_case(*shape, args.repeats) for shape in SHAPES]
    set_backend(original)

    head = f"{'shape (BxCinxCoutxHxW/s)':>28}" + "".join(f"{n:>12}" for n in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}"
    print(head)
    for i, (b, cin, cout, h, w, s) in enumerate(SHAPES):
        label = f"{b}x{cin}x{cout}x{h}x{w}/{s}"
        line = f"{label:>28}"
        for name in backends:
            line += f"{results[name][i] * 1e3:>10.2f}ms"
        if len(backends) == 2:
            line += f"{results['pure'][i] / results['compiled'][i]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
