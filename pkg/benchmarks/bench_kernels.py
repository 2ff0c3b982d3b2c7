"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from mtuda import _pykernels, kernels

try:
    from mtuda import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    grids = {f"cca {n}x{n}": (rng.random((n, n)) > 0.5).astype(np.uint8) for n in (8, 64, 256)}
    src = np.cumsum(rng.integers(0, 50, 256)).astype(np.int64)
    tgt = np.cumsum(rng.integers(0, 50, 256)).astype(np.int64)
    tgt = tgt * src[-1] // tgt[-1]
    tgt[-1] = src[-1]
    return grids, (src, tgt)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    grids, hist = cases(np.random.default_rng(args.seed))
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name, _ in impls) + (f"{'speedup':>10}" if _ckernels else ""))
    jobs = [(k, lambda m, g=g: m.label_components_4(g)) for k, g in grids.items()]
    jobs.append(("histogram 256", lambda m: m.histogram_bin_map(*hist)))
    for label, fn in jobs:
        times = []
        for _, mod in impls:
            n = 3 if mod is _pykernels else 50
            times.append(min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n)
        row = f"{label:<16}" + "".join(f"{t * 1e6:>12.1f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
