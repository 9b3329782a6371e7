"""Compare the compiled and numpy attention-convolution kernels.

    python benchmarks/bench_conv.py [--repeat 20] [--json]

Each case times one forward and one backward pass over a batch of ``N x N x K``
attention images with a ``k x k`` kernel and checks that both backends agree.
"""
import argparse
import json
import timeit

import numpy as np

from eatn import kernels
from eatn.evolving import tap_mask

CASES = [  # (N, heads, kernel, mode)
    (10, 4, 3, "encoder"),
    (10, 4, 3, "decoder_self"),
    (32, 8, 3, "encoder"),
    (32, 8, 5, "encoder_decoder"),
    (64, 8, 3, "decoder_self"),
]


BATCH = 8


def bench_case(N, K, k, mode, repeat, rng):
    x = rng.standard_normal((BATCH, N, N, K))
    w = rng.standard_normal((k, k, K, K))
    b = rng.standard_normal(K)
    g = rng.standard_normal((BATCH, N, N, K))
    mask = tap_mask(mode, k)
    row = {"N": N, "heads": K, "kernel": k, "mode": mode}
    outputs = {}
    for backend in kernels.available_backends():
        def step():
            y = kernels.conv2d_forward(x, w, b, mask, backend)
            return y, kernels.conv2d_backward(x, w, mask, g, backend)
        outputs[backend] = step()
        best = min(timeit.repeat(step, number=1, repeat=repeat))
        row[f"{backend}_ms"] = best * 1e3
    if len(outputs) == 2:
        a, b_ = outputs["compiled"], outputs["python"]
        arrays = zip((a[0], *a[1]), (b_[0], *b_[1]))
        row["max_abs_diff"] = float(max(np.abs(u - v).max() for u, v in arrays))
        row["speedup"] = row["python_ms"] / row["compiled_ms"]
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--json", action="store_true")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = [bench_case(*case, args.repeat, rng) for case in CASES]
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"default backend: {kernels.BACKEND}, batch {BATCH}")
    print(f"{'N':>4} {'K':>3} {'k':>2} {'mode':<16} {'compiled ms':>12} {'python ms':>10} {'speedup':>8} {'max diff':>9}")
    for r in rows:
        compiled = f"{r['compiled_ms']:12.3f}" if "compiled_ms" in r else f"{'n/a':>12}"
        speed = f"{r['speedup']:8.1f}" if "speedup" in r else f"{'':>8}"
        diff = f"{r['max_abs_diff']:9.1e}" if "max_abs_diff" in r else ""
        print(f"{r['N']:>4} {r['heads']:>3} {r['kernel']:>2} {r['mode']:<16} {compiled} {r['python_ms']:10.3f} {speed} {diff}")


if __name__ == "__main__":
    main()
