"""Time the compiled and pure-Python geometry kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--triangles N] [--queries N] [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vtanim import kernels
from vtanim.mesh import TriMesh, build_bvh


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--triangles", type=int, default=2000)
    p.add_argument("--queries", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n = args.triangles
    mesh = TriMesh(rng.uniform(-50, 50, size=(3 * n, 3)), np.arange(3 * n).reshape(n, 3))
    acc = build_bvh(mesh)
    q = rng.uniform(-60, 60, size=(args.queries, 3))
    moved = mesh.vertices + rng.normal(size=mesh.vertices.shape)
    tree = (acc.lo, acc.hi, acc.left, acc.right, acc.start, acc.count, acc.order)
    topo = (acc.left, acc.right, acc.start, acc.count, acc.order)

    cases = {
        "query_bvh": lambda k: k.query_bvh(mesh.vertices, mesh.triangles, *tree, q),
        "query_brute": lambda k: k.query_brute(mesh.vertices, mesh.triangles, q[: max(1, len(q) // 10)]),
        "refit_bvh": lambda k: k.refit_bvh(moved, mesh.triangles, *topo),
    }
    backends = kernels.available_backends()
    print(f"{n} triangles, {len(q)} queries (brute: {max(1, len(q) // 10)}), best of {args.repeat}")
    print(f"{'kernel':<12}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, case in cases.items():
        t = {b: best_of(lambda: case(k), args.repeat) for b, k in backends.items()}
        row = f"{name:<12}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in t:
            row += f"{t['python'] / t['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
