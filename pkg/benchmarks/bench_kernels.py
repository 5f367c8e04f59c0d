"""Time the compiled and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--points 1024] [--repeat 5]

Each kernel is run on identical inputs through every importable backend;
outputs are compared for equality before the timings are printed.
"""
import argparse
import time

import numpy as np

from adaptconv import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def workloads(n, k, rng):
    points = rng.normal(size=(n, 3))
    feats = rng.normal(size=(n, 32))
    idx = rng.integers(0, n, size=n * k)
    values = rng.normal(size=(n * k, 32))
    edges = rng.normal(size=(n, k, 64))
    return {
        f"knn_self N={n} k={k}": lambda b: b.knn_self(points, k),
        f"knn_self D=32 N={n} k={k}": lambda b: b.knn_self(feats, k),
        f"knn_query N={n}/{n // 4}": lambda b: b.knn_query(points[: n // 4], points, 1),
        f"farthest_point_sample N={n} -> {n // 4}": lambda b: b.farthest_point_sample(points, n // 4),
        f"scatter_add_rows E={n * k}": lambda b: b.scatter_add_rows(idx, values, n),
        f"neighbor_max {n}x{k}x64": lambda b: b.neighbor_max(edges),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=1024)
    parser.add_argument("--k", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    names = sorted(backends)
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    print(f"{'kernel':<36}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}  equal")
    for label, fn in workloads(args.points, args.k, np.random.default_rng(0)).items():
        results = {n: best_of(lambda: fn(backends[n]), args.repeat) for n in names}
        row = f"{label:<36}" + "".join(f"{results[n][0] * 1e3:>10.2f}ms" for n in names)
        if len(names) == 2:
            speedup = results["python"][0] / results["cython"][0]
            equal = same(results["python"][1], results["cython"][1])
            row += f"{speedup:>9.1f}x  {equal}"
        print(row)


if __name__ == "__main__":
    main()
