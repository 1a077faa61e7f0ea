"""Time the compiled and pure-Python kernel backends on representative inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from gscart.kernels import available_backends, get_backend


def cases(rng):
    a = rng.uniform(-10, 10, 4096)
    b = a + rng.choice([0.01, 0.1, 1.0, 10.0, np.inf], a.size)
    idx = np.sort(rng.choice(50 * 50, 250, replace=False))
    vals = rng.uniform(size=idx.size)
    X = rng.uniform(size=(900, 3))
    C = rng.uniform(size=(30, 3))
    return {
        "mills_shift[4096]": lambda k: k.mills_shift(a, b, 40.0),
        "idw_fill[50x50, 250 obs]": lambda k: k.idw_fill(50, 50, idx, vals, 2.0, 1e-12),
        "kmeans_assign[900x3, k=30]": lambda k: k.kmeans_assign(X, C),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    backends = {name: get_backend(name) for name in available_backends()}
    print(f"{'kernel':<28}" + "".join(f"{name + ' (ms)':>16}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for name, mod in backends.items():
            fn(mod)
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        row = f"{label:<28}" + "".join(f"{t:>16.3f}" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
