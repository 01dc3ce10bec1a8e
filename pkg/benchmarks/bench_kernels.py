"""Time the numba and numpy implementations of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends run on identical inputs; the script also reports the max abs
difference between them so a speedup never hides a divergence.
"""
import argparse
import time

import numpy as np

from sast import kernels
from sast._backend import HAS_NUMBA, use_kernels


def _inputs(rng):
    n = 200_000
    ev = dict(t=np.sort(rng.integers(0, 50_000, n)).astype(np.int64), x=rng.integers(0, 256, n).astype(np.int32),
              y=rng.integers(0, 256, n).astype(np.int32), p=rng.integers(0, 2, n).astype(np.int8))
    vox = rng.poisson(0.3, (4, 256, 256)).astype(np.float64)
    N, K, C = 64, 16, 32
    tp = rng.standard_normal((N, K, C))
    pad = np.zeros((N, K), bool)
    pad[:, 12:] = True
    ws = [rng.standard_normal((C, C)) / np.sqrt(C) for _ in range(4)]
    return ev, vox, (tp, pad, *ws, 2, -1e9)


def cases(rng):
    ev, vox, att = _inputs(rng)
    yield "accumulate_events", lambda: kernels.accumulate_events(
        ev["t"], ev["x"], ev["y"], ev["p"], np.zeros((4, 256, 256)), 2, 50_000, 0)
    yield "max_pool", lambda: kernels.max_pool(vox, 4)
    yield "masked_attention", lambda: kernels.masked_attention(*att)[0]


def bench(fn, repeat):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), fn()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba not installed; nothing to compare")
        return
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max|diff|':>12}")
    for name, fn in cases(np.random.default_rng(0)):
        with use_kernels("numpy"):
            t_np, ref = bench(fn, args.repeat)
        with use_kernels("numba"):
            t_nb, out = bench(fn, args.repeat)
        diff = float(np.max(np.abs(out - ref)))
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
