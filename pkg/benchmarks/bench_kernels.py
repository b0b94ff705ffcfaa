"""Time each hot kernel in its numba and numpy flavours.

    python benchmarks/bench_kernels.py [--repeat 5]

Both flavours are called directly, so the FILTERMEND_DISABLE_JIT flag does
not matter here.  The first numba call (compilation or cache load) is
excluded from the timings.
"""
import argparse
import time

import numpy as np

from filtermend import kernels
from filtermend.sparse_select import GramSystem, lambda_max


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.uniform(size=(64, 3, 28, 28))
    w = rng.normal(size=(12, 3, 5, 5))
    b = rng.normal(size=12)
    dout = rng.normal(size=(64, 12, 24, 24))
    a = np.maximum(rng.normal(size=(64, 12, 24, 24)), 0)
    _, arg = kernels.maxpool2_forward_np(a)
    dpool = rng.normal(size=(64, 12, 12, 12))
    values = rng.normal(size=200_000)
    edges = np.linspace(-4, 4, 65)
    X = rng.normal(size=(5000, 32))
    y = X[:, :4].sum(axis=1) + rng.normal(size=5000)
    sys_ = GramSystem.from_data(X, y)
    wts = rng.uniform(0.5, 2.0, 32)
    lam = 0.05 * lambda_max(sys_, wts)

    def cd(impl):
        return lambda: impl(sys_.gram, sys_.c, wts, lam, np.zeros(32), sys_.yy, 10_000, 1e-7, 1e-6)

    return {
        "conv2d_forward": lambda impl: lambda: impl(x, w, b, 1),
        "conv2d_backward": lambda impl: lambda: impl(x, w, dout, 1),
        "maxpool2_forward": lambda impl: lambda: impl(a),
        "maxpool2_backward": lambda impl: lambda: impl(dpool, arg, a.shape),
        "bin_counts": lambda impl: lambda: impl(values, edges),
        "cd_solve": cd,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, make in cases(rng).items():
        t_nb = best_of(make(getattr(kernels, f"{name}_nb")), args.repeat)
        t_np = best_of(make(getattr(kernels, f"{name}_np")), args.repeat)
        print(f"{name:<20}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
